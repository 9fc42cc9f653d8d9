"""Paired visual/tactile samples with parametric textures and known contact regions.

Each class owns an oriented sinusoidal grating (frequency, orientation). A
visual image shows a coloured object on a cluttered background with the class
texture inside a circular contact region; the paired tactile image is that
same texture seen through a fixed magnification, modulated by a contact dome
whose size follows the contact radius, lit per channel and speckled.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import tensorfile
from .errors import FormatError, LoadError, ValidationError

MANIFEST_HEADER = ["visual", "tactile", "label", "mask"]
_MASK64 = (1 << 64) - 1


def _mix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def splitmix_seed(seed: int, index: int) -> int:
    """Per-sample seed derived from (global seed, sample index)."""
    return _mix64((_mix64(seed & _MASK64) + index) & _MASK64)


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 8
    pairs_per_class: int = 64
    image_size: int = 32
    channels: int = 3
    rho: float = 1.0
    noise_std: float = 0.05
    radius_min: float = 7.0
    radius_max: float = 10.0
    orientation_jitter: float = 0.2
    frequency_jitter: float = 0.05
    frequency_low: float = 0.12
    frequency_high: float = 0.26
    clutter: float = 0.05
    color_jitter: float = 0.3
    magnification: float = 2.0
    seed: int = 0

    def validate(self) -> "SynthSpec":
        if self.num_classes < 2:
            raise ValidationError("need at least 2 classes")
        if not 0.0 <= self.rho <= 1.0:
            raise ValidationError(f"rho must lie in [0, 1], got {self.rho}")
        if self.pairs_per_class < 1:
            raise ValidationError("pairs_per_class must be >= 1")
        if self.channels not in (1, 3):
            raise ValidationError("channels must be 1 or 3")
        # the object centre is drawn from [r + 3, size - r - 4]
        if not 0 < self.radius_min <= self.radius_max <= (self.image_size - 7) / 2:
            raise ValidationError(
                f"radius range must satisfy 0 < min <= max <= (size - 7) / 2 = "
                f"{(self.image_size - 7) / 2} for size {self.image_size}"
            )
        if self.noise_std < 0:
            raise ValidationError("noise_std must be >= 0")
        return self


@dataclass(frozen=True)
class TextureParams:
    class_index: int
    frequency: float
    orientation: float
    phase: float


@dataclass
class SamplePair:
    visual: np.ndarray
    tactile: np.ndarray
    label: int
    contact_mask: np.ndarray
    visual_texture: TextureParams | None = None
    tactile_texture: TextureParams | None = None
    contact_radius: float = 0.0


def class_parameters(spec: SynthSpec) -> list[tuple[float, float]]:
    """(frequency, orientation) per class; all pairs distinct by construction."""
    k = spec.num_classes
    n_freq = 1 if k < 4 else 2
    n_orient = math.ceil(k / n_freq)
    freqs = np.linspace(spec.frequency_low, spec.frequency_high, n_freq) if n_freq > 1 \
        else np.array([spec.frequency_low])
    out = []
    for c in range(k):
        out.append((float(freqs[c // n_orient]), math.pi * (c % n_orient) / n_orient))
    return out


def _orientation_spacing(spec: SynthSpec) -> float:
    n_freq = 1 if spec.num_classes < 4 else 2
    return math.pi / math.ceil(spec.num_classes / n_freq)


def _draw_texture(cls: int, spec: SynthSpec, rng: np.random.Generator) -> TextureParams:
    freq, theta = class_parameters(spec)[cls]
    half = 0.5 * _orientation_spacing(spec) * spec.orientation_jitter
    return TextureParams(
        class_index=cls,
        frequency=freq * (1.0 + rng.uniform(-spec.frequency_jitter, spec.frequency_jitter)),
        orientation=theta + rng.uniform(-half, half),
        phase=rng.uniform(0.0, 2.0 * math.pi),
    )


def grating(params: TextureParams, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Texture value in [0.15, 0.85] at offsets (dx, dy) from the contact centre."""
    proj = dx * math.cos(params.orientation) + dy * math.sin(params.orientation)
    return 0.5 + 0.35 * np.sin(2.0 * math.pi * params.frequency * proj + params.phase)


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return xs, ys


def tactile_texture(params: TextureParams, spec: SynthSpec) -> np.ndarray:
    """The grating as the sensor sees it: visual offsets shrunk by the magnification."""
    xs, ys = _grid(spec.image_size)
    c = (spec.image_size - 1) / 2.0
    return grating(params, (xs - c) / spec.magnification, (ys - c) / spec.magnification)


_LIGHT_DIRS = [(math.cos(a), math.sin(a)) for a in (0.0, 2.0 * math.pi / 3, 4.0 * math.pi / 3)]


def render_tactile(params: TextureParams, radius: float, spec: SynthSpec,
                   noise: np.ndarray | None = None) -> np.ndarray:
    """Noise-free tactile image (optionally with a given speckle field applied)."""
    size = spec.image_size
    xs, ys = _grid(size)
    c = (size - 1) / 2.0
    sigma = 0.55 * radius * spec.magnification
    r2 = (xs - c) ** 2 + (ys - c) ** 2
    dome = np.exp(-r2 / (2.0 * sigma * sigma))
    base = 0.5 + 0.8 * (tactile_texture(params, spec) - 0.5) * dome
    # dome gradient scaled so the rim shading peaks near 0.1
    gx = -(xs - c) / (sigma * sigma) * dome * sigma * 0.17
    gy = -(ys - c) / (sigma * sigma) * dome * sigma * 0.17
    if spec.channels == 1:
        img = base[..., None]
    else:
        img = np.stack([base + lx * gx + ly * gy for lx, ly in _LIGHT_DIRS], axis=-1)
    if noise is not None:
        img = img * (1.0 + noise)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_pair(cls: int, spec: SynthSpec, sample_seed: int) -> SamplePair:
    """Deterministic in (spec.seed, sample_seed)."""
    if not 0 <= cls < spec.num_classes:
        raise ValidationError(f"class {cls} out of range [0, {spec.num_classes})")
    rng = np.random.default_rng(splitmix_seed(spec.seed, sample_seed))
    size = spec.image_size
    xs, ys = _grid(size)

    vis_tex = _draw_texture(cls, spec, rng)
    # correlation control: the draws happen unconditionally so rho never shifts the stream
    resample = rng.uniform() >= spec.rho
    other_cls = int(rng.integers(spec.num_classes))
    other_tex = _draw_texture(other_cls, spec, rng)
    tac_tex = other_tex if resample else vis_tex

    radius = rng.uniform(spec.radius_min, spec.radius_max)
    margin = radius + 1.0
    ocx, ocy = rng.uniform(margin + 2, size - margin - 3, size=2)
    ax_, ay_ = rng.uniform(radius + 2.0, radius + 5.0, size=2)
    ccx = ocx + rng.uniform(-1.5, 1.5)
    ccy = ocy + rng.uniform(-1.5, 1.5)
    ccx = float(np.clip(ccx, radius, size - 1 - radius))
    ccy = float(np.clip(ccy, radius, size - 1 - radius))

    bg_color = 0.5 + spec.color_jitter * rng.uniform(-0.3, 0.3, size=3)
    obj_color = 0.5 + spec.color_jitter * rng.uniform(-0.25, 0.25, size=3)
    grad_dir = rng.uniform(0.0, 2.0 * math.pi)
    clutter_tex = TextureParams(-1, rng.uniform(0.08, 0.3), rng.uniform(0.0, math.pi),
                                rng.uniform(0.0, 2.0 * math.pi))
    vis_noise = rng.standard_normal((size, size, 3))
    tac_noise = rng.standard_normal((size, size, spec.channels))

    ramp = ((xs - size / 2) * math.cos(grad_dir) + (ys - size / 2) * math.sin(grad_dir)) / size
    background = bg_color[None, None, :] + 0.15 * ramp[..., None]
    background = background + spec.clutter * (grating(clutter_tex, xs, ys)[..., None] - 0.5)
    obj = ((xs - ocx) / ax_) ** 2 + ((ys - ocy) / ay_) ** 2 <= 1.0
    mask = (xs - ccx) ** 2 + (ys - ccy) ** 2 <= radius ** 2
    texture = grating(vis_tex, xs - ccx, ys - ccy)

    img = np.where(obj[..., None], obj_color[None, None, :], background)
    img = np.where(mask[..., None], texture[..., None], img)
    img = img + spec.noise_std * vis_noise
    img = np.clip(img, 0.0, 1.0)
    if spec.channels == 1:
        img = img.mean(axis=-1, keepdims=True)

    tactile = render_tactile(tac_tex, radius, spec, spec.noise_std * tac_noise)
    return SamplePair(
        visual=img.astype(np.float32),
        tactile=tactile,
        label=cls,
        contact_mask=mask.astype(np.float32),
        visual_texture=vis_tex,
        tactile_texture=tac_tex,
        contact_radius=float(radius),
    )


def sample_class(index: int, spec: SynthSpec) -> int:
    """Classes interleave so every prefix of K samples is balanced."""
    return index % spec.num_classes


def generate_samples(spec: SynthSpec) -> list[SamplePair]:
    spec.validate()
    total = spec.num_classes * spec.pairs_per_class
    return [generate_pair(sample_class(i, spec), spec, i) for i in range(total)]


def split_indices(labels, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified split; each class contributes round(fraction * count) training rows."""
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError(f"train fraction must lie in (0, 1), got {train_fraction}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(splitmix_seed(seed, 0xC0FFEE))
    train = []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        train.extend(idx[: int(round(train_fraction * len(idx)))].tolist())
    train = np.array(sorted(train), dtype=np.int64)
    test = np.setdiff1d(np.arange(len(labels)), train)
    return train, test


def generate_dataset(spec: SynthSpec, out_dir: str | os.PathLike,
                     train_fraction: float | None = 0.7) -> Path:
    """Write tensors plus ``manifest.csv`` (and ``train.csv``/``test.csv`` when splitting)."""
    spec.validate()
    root = Path(out_dir)
    try:
        for sub in ("visual", "tactile", "mask"):
            (root / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise LoadError(f"cannot create dataset directory {root}: {exc.strerror}") from exc
    rows = []
    total = spec.num_classes * spec.pairs_per_class
    for i in range(total):
        pair = generate_pair(sample_class(i, spec), spec, i)
        names = [f"visual/{i:05d}.cvt", f"tactile/{i:05d}.cvt", f"mask/{i:05d}.cvt"]
        arrays = [pair.visual, pair.tactile, pair.contact_mask]
        for name, arr in zip(names, arrays):
            try:
                tensorfile.save_tensor(root / name, arr)
            except OSError as exc:
                raise LoadError(f"cannot write {root / name}: {exc.strerror}") from exc
        rows.append([names[0], names[1], str(pair.label), names[2]])
    manifest = root / "manifest.csv"
    _write_manifest(manifest, rows)
    if train_fraction is not None:
        train, test = split_indices([int(r[2]) for r in rows], train_fraction, spec.seed)
        _write_manifest(root / "train.csv", [rows[i] for i in train])
        _write_manifest(root / "test.csv", [rows[i] for i in test])
    meta = {k: v for k, v in asdict(spec).items()}
    tensorfile.write_metadata(root / "synth.txt", meta)
    return manifest


def _write_manifest(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)


class ManifestDataset:
    """Lazily loaded view of a manifest; shapes are validated on access.

    The expected image shape is taken from ``image_shape`` or, if omitted,
    from the first visual image loaded.
    """

    def __init__(self, path: str | os.PathLike, image_shape: tuple[int, int, int] | None = None):
        self.path = Path(path)
        self.root = self.path.parent
        self.image_shape = image_shape
        try:
            with open(self.path, newline="") as fh:
                reader = csv.reader(fh)
                header = next(reader, None)
                if header != MANIFEST_HEADER:
                    raise FormatError(f"{self.path}: header must be {','.join(MANIFEST_HEADER)}")
                self.rows = []
                for lineno, row in enumerate(reader, start=2):
                    if len(row) != 4:
                        raise FormatError(f"{self.path}:{lineno}: expected 4 columns")
                    try:
                        label = int(row[2])
                    except ValueError:
                        raise FormatError(f"{self.path}:{lineno}: bad label {row[2]!r}") from None
                    self.rows.append((row[0], row[1], label, row[3]))
        except OSError as exc:
            raise LoadError(f"cannot read manifest {self.path}: {exc.strerror}") from exc
        self._cache: dict[int, tuple] = {}

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows], dtype=np.int64)

    def _load(self, row_number: int, rel: str) -> np.ndarray:
        target = self.root / rel
        if not target.exists():
            raise LoadError(f"{self.path}: row {row_number}: missing file {rel}")
        return tensorfile.load_tensor(target)

    def _check(self, row_number: int, what: str, arr: np.ndarray) -> None:
        if self.image_shape is None:
            self.image_shape = tuple(arr.shape)
        if tuple(arr.shape) != tuple(self.image_shape):
            h, w, c = self.image_shape
            raise ValidationError(
                f"{self.path}: row {row_number}: {what} has shape {tuple(arr.shape)}, "
                f"expected {h}x{w}x{c}"
            )

    def __getitem__(self, i: int) -> SamplePair:
        if i in self._cache:
            v, t, label, m = self._cache[i]
        else:
            vis_rel, tac_rel, label, mask_rel = self.rows[i]
            row_number = i + 1
            v = self._load(row_number, vis_rel)
            self._check(row_number, "visual", v)
            t = self._load(row_number, tac_rel)
            self._check(row_number, "tactile", t)
            m = self._load(row_number, mask_rel)
            if m.shape != v.shape[:2]:
                raise ValidationError(
                    f"{self.path}: row {row_number}: mask shape {m.shape} != {v.shape[:2]}"
                )
            self._cache[i] = (v, t, label, m)
        return SamplePair(visual=v, tactile=t, label=label, contact_mask=m)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(visual, tactile, labels, masks) stacked over all rows."""
        items = [self[i] for i in range(len(self))]
        if not items:
            raise ValidationError(f"{self.path}: manifest has no rows")
        return (
            np.stack([s.visual for s in items]),
            np.stack([s.tactile for s in items]),
            np.array([s.label for s in items], dtype=np.int64),
            np.stack([s.contact_mask for s in items]),
        )


def load_manifest(path: str | os.PathLike,
                  image_shape: tuple[int, int, int] | None = None) -> ManifestDataset:
    return ManifestDataset(path, image_shape)


def arrays_from_samples(samples) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    return (
        np.stack([s.visual for s in samples]),
        np.stack([s.tactile for s in samples]),
        np.array([s.label for s in samples], dtype=np.int64),
        np.stack([s.contact_mask for s in samples]),
    )


def spec_with(spec: SynthSpec, **changes) -> SynthSpec:
    return replace(spec, **changes).validate()
