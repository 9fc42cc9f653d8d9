"""Saliency, PCA feature maps, the ablation grid and the finite-difference suite."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from . import tensorfile
from .contrastive import (ContrastiveEncoder, PretrainConfig, _no_tape, freeze, nt_xent_loss,
                          pretrain, similarity_matrix)
from .errors import DegenerateInputError, ValidationError
from .pipeline import ConViTacModel, ModelConfig, Split, TrainConfig, evaluate, train_supervised
from .tensor import Tensor

log = logging.getLogger(__name__)


# --------------------------------------------------------------------- saliency

@dataclass
class Saliency:
    """Per-frame maps, each (N, H, W) with values in [0, 1]."""

    visual: np.ndarray
    tactile: np.ndarray


def _cam(activations: np.ndarray, grads: np.ndarray, grid: int, patch: int) -> np.ndarray:
    """Grad-CAM over a patch sequence (P x D) upsampled to pixels."""
    weights = grads.mean(axis=0)
    cam = np.maximum(activations @ weights, 0.0).reshape(grid, grid)
    cam = np.kron(cam, np.ones((patch, patch)))
    peak = cam.max()
    return cam / peak if peak > 0 else cam


def grad_cam(model: ConViTacModel, v_frames: np.ndarray, t_frames: np.ndarray,
             target_class: int) -> Saliency:
    """Saliency of ``target_class`` for one sample's (N, H, W, C) frame stacks.

    The final encoder block's patch embeddings play the role of the
    convolutional activations; the patch grid is the spatial map.
    """
    k = model.config.num_classes
    if not 0 <= target_class < k:
        raise ValidationError(f"target class {target_class} outside [0, {k})")
    v = np.asarray(v_frames, dtype=np.float32)[None]
    t = np.asarray(t_frames, dtype=np.float32)[None]
    onehot = np.zeros((1, k), dtype=np.float32)
    onehot[0, target_class] = 1.0
    with T.Tape() as tape:
        res = model.forward(v, t)
        score = T.sum(T.mul(res.logits, Tensor(onehot)))
    # the score only depends on trainable weights through the tape; make sure
    # the feature maps are on it even when no parameter requires grad
    tape.backward(score)
    enc = model.config.encoder
    grid, patch, p = enc.image_size // enc.patch_size, enc.patch_size, enc.num_patches
    maps = []
    for feats in (res.visual_features, res.tactile_features):
        acts = feats.values[0].astype(np.float64)
        grads = feats.grad_or_zeros()[0].astype(np.float64)
        frames = [
            _cam(acts[i * p:(i + 1) * p], grads[i * p:(i + 1) * p], grid, patch)
            for i in range(model.config.frames)
        ]
        maps.append(np.stack(frames).astype(np.float32))
    return Saliency(*maps)


def mask_mass(saliency: np.ndarray, mask: np.ndarray) -> float:
    """Fraction of total saliency that falls inside the contact mask (nan when all zero)."""
    total = float(saliency.sum())
    if total <= 0:
        return float("nan")
    return float((saliency * (mask > 0)).sum() / total)


def saliency_report(model: ConViTacModel, split: Split, limit: int | None = None) -> dict:
    """Mean visual saliency mass inside the contact mask over a split.

    The mask area fraction is returned too, as the value a uniform map scores.
    """
    if split.masks is None:
        raise ValidationError("split carries no contact masks")
    n = len(split) if limit is None else min(limit, len(split))
    inside, area = [], []
    for i in range(n):
        sal = grad_cam(model, split.visual[i], split.tactile[i], int(split.labels[i]))
        inside.append(mask_mass(sal.visual[0], split.masks[i]))
        area.append(float(np.mean(split.masks[i] > 0)))
    return {"mask_mass": float(np.nanmean(inside)), "mask_area": float(np.mean(area)), "samples": n}


# -------------------------------------------------------------------------- PCA

@dataclass
class PcaProjection:
    components: np.ndarray      # 2 x D, orthonormal rows
    coords: np.ndarray          # M x 2
    explained_ratio: np.ndarray  # (2,)
    eigenvalues: np.ndarray      # (2,)
    mean: np.ndarray             # (D,)

    def transform(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features, dtype=np.float64) - self.mean) @ self.components.T


POWER_ITERATIONS = 500
POWER_TOL = 1e-12


def _power_iteration(cov: np.ndarray, previous: list[np.ndarray], seed: int) -> tuple[float, np.ndarray]:
    """Top eigenpair of ``cov`` restricted to the complement of ``previous``."""
    d = cov.shape[0]
    v = np.random.default_rng(seed).standard_normal(d)

    def orthogonalize(x):
        # two Gram-Schmidt passes keep the result orthogonal to working precision
        for _ in range(2):
            for u in previous:
                x = x - (u @ x) * u
        return x

    v = orthogonalize(v)
    v /= np.linalg.norm(v)
    lam = float(v @ cov @ v)
    floor = 1e-13 * np.linalg.norm(cov)
    for _ in range(POWER_ITERATIONS):
        w = orthogonalize(cov @ v)
        norm = np.linalg.norm(w)
        if norm <= floor:
            # the complement is numerically null: eigenvalue zero, any unit vector there
            return 0.0, v
        v = w / norm
        new = float(v @ cov @ v)
        if abs(new - lam) <= POWER_TOL * max(abs(new), 1e-300):
            lam = new
            break
        lam = new
    return max(lam, 0.0), v


def pca_2d(features: np.ndarray, seed: int = 0) -> PcaProjection:
    """Top-2 principal components by power iteration with deflation, in 64-bit."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValidationError(f"need an M x D matrix with M >= 3, got shape {x.shape}")
    if x.shape[1] < 2:
        raise ValidationError("need at least two feature dimensions")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (x.shape[0] - 1)
    total = float(np.trace(cov))
    if total <= 0 or not np.isfinite(total):
        raise DegenerateInputError("all feature rows are identical; PCA is undefined")
    comps, lams = [], []
    for k in range(2):
        lam, v = _power_iteration(cov, comps, seed + k)
        # fix the sign so the largest-magnitude entry is positive
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        comps.append(v)
        lams.append(lam)
    components = np.stack(comps)
    eig = np.array(lams)
    return PcaProjection(components, xc @ components.T, eig / total, eig, mean)


def centroid_distance(coords: np.ndarray, modality: Sequence[str]) -> float:
    """Distance between the visual and tactile centroids in PCA space."""
    modality = np.asarray(modality)
    cv = coords[modality == "visual"].mean(axis=0)
    ct = coords[modality == "tactile"].mean(axis=0)
    return float(np.linalg.norm(cv - ct))


# ------------------------------------------------------------ feature export

def export_features(model: ConViTacModel, split: Split,
                    batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Mean-pooled visual and tactile rows after their modality projections."""
    vis, tac = [], []
    with _no_tape():
        for lo in range(0, len(split), batch_size):
            part = split.subset(np.arange(lo, min(lo + batch_size, len(split))))
            fv = model.encode_modality(model.visual_encoder, part.visual)
            ft = model.encode_modality(model.tactile_encoder, part.tactile)
            pv, pt = model.fusion.project(fv, ft)
            vis.append(pv.values.mean(axis=1))
            tac.append(pt.values.mean(axis=1))
    return np.concatenate(vis), np.concatenate(tac)


def write_feature_export(out_dir: str | os.PathLike, visual: np.ndarray, tactile: np.ndarray,
                         labels: Sequence[int]) -> tuple[PcaProjection, float]:
    """Save both feature matrices and a joint PCA as ``pca.csv`` (x,y,modality,label)."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    tensorfile.save_tensor(root / "visual_features.cvt", visual.astype(np.float32))
    tensorfile.save_tensor(root / "tactile_features.cvt", tactile.astype(np.float32))
    proj = pca_2d(np.concatenate([visual, tactile]))
    modality = ["visual"] * len(visual) + ["tactile"] * len(tactile)
    all_labels = list(labels) + list(labels)
    with open(root / "pca.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "y", "modality", "label"])
        for (x, y), m, lab in zip(proj.coords, modality, all_labels):
            writer.writerow([f"{x:.6f}", f"{y:.6f}", m, int(lab)])
    return proj, centroid_distance(proj.coords, modality)


# --------------------------------------------------------------------- ablation

ABLATION_HEADER = ["condition", "fusion", "seed", "eval_acc"]


@dataclass(frozen=True)
class AblationConfig:
    conditions: tuple[str, ...] = ("none", "both")
    fusions: tuple[str, ...] = ("concat",)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    pretrain: PretrainConfig = PretrainConfig()


def ablation_run(train: Split, eval_split: Split, config: AblationConfig = AblationConfig(),
                 out_csv: str | os.PathLike | None = None,
                 on_cell: Callable[[dict], None] | None = None) -> list[dict]:
    """Train and evaluate every (condition, fusion, seed) cell.

    One contrastive encoder is pretrained per seed on the training pairs and
    shared, frozen, by that seed's conditioned cells. Rows are appended to
    ``out_csv`` as each cell finishes.
    """
    out = None if out_csv is None else Path(out_csv)
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(ABLATION_HEADER)
    rows = []
    needs_encoder = any(c != "none" for c in config.conditions)
    for seed in config.seeds:
        encoder = None
        if needs_encoder:
            encoder = ContrastiveEncoder(replace(config.model.encoder, seed=seed))
            pretrain(encoder, train.visual, train.tactile, replace(config.pretrain, seed=seed))
            freeze(encoder)
        cache: dict[bool, np.ndarray] = {}
        for fusion in config.fusions:
            for condition in config.conditions:
                mcfg = replace(config.model, fusion=fusion, condition=condition, seed=seed)
                model = ConViTacModel(mcfg, encoder if condition != "none" else None)
                tr = Split(train.visual, train.tactile, train.labels)
                ev = Split(eval_split.visual, eval_split.tactile, eval_split.labels)
                if condition != "none":
                    if not cache:
                        cache[True] = model.condition_rows(tr.visual, tr.tactile)
                        cache[False] = model.condition_rows(ev.visual, ev.tactile)
                    tr.cond, ev.cond = cache[True], cache[False]
                train_supervised(model, tr, ev, replace(config.train, seed=seed))
                acc = evaluate(model, ev)
                row = {"condition": condition, "fusion": fusion, "seed": seed, "eval_acc": acc}
                rows.append(row)
                if out is not None:
                    with open(out, "a", newline="") as fh:
                        csv.writer(fh, lineterminator="\n").writerow(
                            [condition, fusion, seed, f"{acc:.6f}"]
                        )
                log.info("ablation %s/%s seed %d: %.4f", condition, fusion, seed, acc)
                if on_cell is not None:
                    on_cell(row)
    return rows


def summarize(rows: Iterable[dict]) -> list[dict]:
    """Mean and (population) std of eval accuracy per (condition, fusion)."""
    groups: dict[tuple[str, str], list[float]] = {}
    for r in rows:
        groups.setdefault((r["condition"], r["fusion"]), []).append(float(r["eval_acc"]))
    return [
        {"condition": c, "fusion": f, "n": len(v), "mean": float(np.mean(v)), "std": float(np.std(v))}
        for (c, f), v in groups.items()
    ]


def format_summary(summary: Sequence[dict]) -> str:
    lines = ["condition,fusion,n,mean,std"]
    lines += [f"{s['condition']},{s['fusion']},{s['n']},{s['mean']:.4f},{s['std']:.4f}" for s in summary]
    lines.append("")
    lines += [
        f"{s['condition']:>6} {s['fusion']:>6}: {100 * s['mean']:.1f} ± {100 * s['std']:.1f}"
        for s in summary
    ]
    return "\n".join(lines) + "\n"


def read_ablation(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ABLATION_HEADER:
            raise ValidationError(f"{path}: header must be {','.join(ABLATION_HEADER)}")
        return [
            {"condition": r["condition"], "fusion": r["fusion"], "seed": int(r["seed"]),
             "eval_acc": float(r["eval_acc"])}
            for r in reader
        ]


def direction_wins(rows: Sequence[dict], better: str, worse: str, fusion: str,
                   strict: bool = True) -> tuple[int, int]:
    """Seeds where ``better`` beats (or, non-strict, matches) ``worse`` for one fusion kind."""
    acc = {(r["condition"], r["seed"]): r["eval_acc"] for r in rows if r["fusion"] == fusion}
    seeds = sorted({s for c, s in acc if c == better} & {s for c, s in acc if c == worse})
    wins = sum(
        (acc[(better, s)] > acc[(worse, s)]) if strict else (acc[(better, s)] >= acc[(worse, s)])
        for s in seeds
    )
    return wins, len(seeds)


# ------------------------------------------------------------ gradient suite

@dataclass
class GradCheckResult:
    name: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < GRADCHECK_TOL


GRADCHECK_TOL = 1e-3
GRADCHECK_EPS = 1e-3


def _uniform(rng: np.random.Generator, *shape) -> Tensor:
    return Tensor(rng.uniform(-1.0, 1.0, size=shape), requires_grad=True)


def _op_cases(rng: np.random.Generator) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    from .cec import CrossModalAttention, align, cross_modal_head
    from .fusion import FusionBlock, fuse

    cases = []
    a, b = _uniform(rng, 3, 3), _uniform(rng, 3, 3)
    w = Tensor(rng.uniform(-1, 1, (3, 3)))
    cases.append(("matmul", lambda: T.sum(T.mul(T.matmul(a, b), w)), [a, b]))
    x, y = _uniform(rng, 2, 4), _uniform(rng, 2, 4)
    cases.append(("add_sub_mul", lambda: T.sum(T.mul(T.sub(T.add(x, y), T.scale(y, 0.3)), x)), [x, y]))
    g = _uniform(rng, 9)
    wg = Tensor(rng.uniform(-1, 1, 9))
    cases.append(("gelu", lambda: T.sum(T.mul(T.gelu(g), wg)), [g]))
    s = _uniform(rng, 3, 5)
    ws = Tensor(rng.uniform(-1, 1, (3, 5)))
    cases.append(("softmax", lambda: T.sum(T.mul(T.softmax(s, axis=-1), ws)), [s]))
    ln, lw, lb = _uniform(rng, 2, 8), _uniform(rng, 8), _uniform(rng, 8)
    wl = Tensor(rng.uniform(-1, 1, (2, 8)))
    cases.append(("layer_norm", lambda: T.sum(T.mul(T.layer_norm(ln, lw, lb), wl)), [ln, lw, lb]))
    n2 = _uniform(rng, 3, 4)
    wn = Tensor(rng.uniform(-1, 1, (3, 4)))
    cases.append(("l2_normalize", lambda: T.sum(T.mul(T.l2_normalize(n2, axis=-1), wn)), [n2]))
    c1, c2 = _uniform(rng, 2, 3), _uniform(rng, 4, 3)
    wc = Tensor(rng.uniform(-1, 1, (6, 3)))
    cases.append(("concat", lambda: T.sum(T.mul(T.concat([c1, c2], axis=0), wc)), [c1, c2]))
    sp = _uniform(rng, 5, 4)
    wsp = Tensor(rng.uniform(-1, 1, (2, 4)))
    cases.append((
        "split_slice",
        lambda: T.add(T.sum(T.mul(T.split(sp, [3, 2], axis=0)[1], wsp)),
                      T.sum(T.gelu(T.slice_axis(sp, 1, 3, axis=1)))),
        [sp],
    ))
    r = _uniform(rng, 2, 3, 4)
    wr = Tensor(rng.uniform(-1, 1, (4, 6)))
    cases.append((
        "reshape_transpose",
        lambda: T.sum(T.mul(T.reshape(T.transpose(r, (2, 0, 1)), (4, 6)), wr)),
        [r],
    ))
    mp = _uniform(rng, 5, 3)
    wm = Tensor(rng.uniform(-1, 1, 3))
    cases.append(("mean_pool", lambda: T.sum(T.mul(T.mean_pool(mp, axis=0), wm)), [mp]))
    logits = _uniform(rng, 2, 5)
    cases.append(("cross_entropy", lambda: T.cross_entropy(logits, [1, 4]), [logits]))
    emb = _uniform(rng, 6, 4)
    cases.append((
        "nt_xent",
        lambda: nt_xent_loss(similarity_matrix(T.l2_normalize(emb, axis=-1), 0.5), 3),
        [emb],
    ))

    dim = 8
    frng = np.random.default_rng(int(rng.integers(2**31)))
    block = FusionBlock(dim, "sws", frng)
    for p in block.parameters():
        p.values = frng.uniform(-1, 1, p.shape)
    fv, ft = _uniform(rng, 4, dim), _uniform(rng, 4, dim)
    wf = Tensor(rng.uniform(-1, 1, (4, dim)))
    cases.append((
        "fusion_sws",
        lambda: T.sum(T.mul(block(fv, ft), wf)),
        [fv, ft] + block.parameters(),
    ))
    pv, pt = _uniform(rng, 4, dim), _uniform(rng, 4, dim)
    wcat = Tensor(rng.uniform(-1, 1, (8, dim)))
    cases.append(("fusion_concat_add", lambda: T.add(
        T.sum(T.mul(fuse(pv, pt, "concat"), wcat)),
        T.sum(T.gelu(fuse(pv, pt, "add")))), [pv, pt]))

    attn = CrossModalAttention(dim, 2, frng)
    for p in attn.parameters():
        p.values = frng.uniform(-1, 1, p.shape)
    e, f = _uniform(rng, 5, dim), _uniform(rng, 3, dim)
    wa = Tensor(rng.uniform(-1, 1, (5, dim)))
    head0 = attn.heads[0]
    wh = Tensor(rng.uniform(-1, 1, (5, dim // 2)))
    cases.append((
        "cross_modal_head",
        lambda: T.sum(T.mul(cross_modal_head(e, f, head0), wh)),
        [e, f] + head0.parameters(),
    ))
    cases.append((
        "align",
        lambda: T.sum(T.mul(align(e, f, attn), wa)),
        [f] + attn.parameters(),
    ))
    return cases


def _model_case(rng: np.random.Generator):
    """Full forward plus cross-entropy on 8x8x1 inputs with D=16, depth 1."""
    from .vit import EncoderConfig

    enc = EncoderConfig(image_size=8, channels=1, patch_size=4, dim=16, depth=1, heads=2)
    contrastive = freeze(ContrastiveEncoder(enc))
    model = ConViTacModel(
        ModelConfig(encoder=enc, num_classes=3, fusion="sws", condition="both", cec_heads=2),
        contrastive,
    )
    prng = np.random.default_rng(int(rng.integers(2**31)))
    for p in model.parameters():
        # U[-1, 1] entries; matrices are divided by sqrt(fan-in) so the loss stays
        # O(1) and its rounding stays below the error floor for exactly-zero
        # gradients (e.g. key biases, which softmax cancels)
        scale = 1.0 / math.sqrt(p.shape[0]) if p.ndim == 2 else 1.0
        p.values = (scale * prng.uniform(-1.0, 1.0, p.shape)).astype(np.float32)
    visual = rng.uniform(-1, 1, (2, 1, 8, 8, 1)).astype(np.float32)
    tactile = rng.uniform(-1, 1, (2, 1, 8, 8, 1)).astype(np.float32)
    labels = [0, 2]
    cond = model.condition_rows(visual, tactile)

    def f():
        return T.cross_entropy(model.forward(visual, tactile, cond).logits, labels)

    return "convitac_model", f, model.parameters()


def gradcheck_suite(seed: int = 0, eps: float = GRADCHECK_EPS,
                    include_model: bool = True) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    cases = _op_cases(rng)
    if include_model:
        cases.append(_model_case(rng))
    results = []
    for name, f, inputs in cases:
        start = time.perf_counter()
        err = T.grad_check(f, inputs, eps)
        results.append(GradCheckResult(name, err, time.perf_counter() - start))
    return results
