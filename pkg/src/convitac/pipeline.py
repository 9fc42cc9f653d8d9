"""The assembled ConViTac model, supervised training, evaluation and checkpoints.

Each modality has its own encoder. Their patch maps are projected and fused,
then (unless the condition mode is ``none``) the frozen contrastive
encoder's patch maps act as attention queries over the fused rows. The
aligned rows are mean-pooled into a linear classification head.
"""

from __future__ import annotations

import logging
import os
import shutil
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from . import tensorfile
from .cec import CrossModalAttention, align
from .contrastive import ContrastiveEncoder, _no_tape, batch_condition_embedding
from .errors import ContractError, DimensionError, LoadError, ValidationError
from .fusion import FusionBlock, FusionKind, fuse
from .layers import Linear, Module, init_std
from .optim import Adam, AdamState, adam_step  # noqa: F401 - re-exported
from .tensor import Tensor
from .vit import EncoderConfig, ViTEncoder

log = logging.getLogger(__name__)

CONDITIONS = ("none", "vision", "touch", "both")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = EncoderConfig()
    num_classes: int = 8
    frames: int = 1
    fusion: str = "concat"
    condition: str = "both"
    cec_heads: int = 4
    cec_residual: bool = False
    seed: int = 0

    def validate(self) -> "ModelConfig":
        self.encoder.validate()
        FusionKind.parse(self.fusion)
        if self.condition not in CONDITIONS:
            raise ValidationError(
                f"unknown condition {self.condition!r}; expected one of {', '.join(CONDITIONS)}"
            )
        if self.num_classes < 2:
            raise ValidationError(f"need at least 2 classes, got {self.num_classes}")
        if self.frames < 1:
            raise ValidationError(f"need at least one frame, got {self.frames}")
        if self.cec_heads < 1 or self.encoder.dim % self.cec_heads:
            raise ValidationError(
                f"dim {self.encoder.dim} not divisible by {self.cec_heads} attention heads"
            )
        return self

    def metadata(self) -> dict:
        enc = self.encoder
        return {
            "image_size": enc.image_size,
            "channels": enc.channels,
            "patch_size": enc.patch_size,
            "dim": enc.dim,
            "depth": enc.depth,
            "heads": enc.heads,
            "mlp_ratio": enc.mlp_ratio,
            "num_classes": self.num_classes,
            "frames": self.frames,
            "fusion": FusionKind.parse(self.fusion).value,
            "condition": self.condition,
            "cec_heads": self.cec_heads,
            "cec_residual": self.cec_residual,
            "seed": self.seed,
        }

    @classmethod
    def from_metadata(cls, meta: dict[str, str]) -> "ModelConfig":
        try:
            enc = EncoderConfig(
                image_size=int(meta["image_size"]),
                channels=int(meta["channels"]),
                patch_size=int(meta["patch_size"]),
                dim=int(meta["dim"]),
                depth=int(meta["depth"]),
                heads=int(meta["heads"]),
                mlp_ratio=float(meta["mlp_ratio"]),
                seed=int(meta["seed"]),
            )
            return cls(
                encoder=enc,
                num_classes=int(meta["num_classes"]),
                frames=int(meta["frames"]),
                fusion=meta["fusion"],
                condition=meta["condition"],
                cec_heads=int(meta["cec_heads"]),
                cec_residual=meta["cec_residual"] == "true",
                seed=int(meta["seed"]),
            ).validate()
        except KeyError as exc:
            raise ValidationError(f"model metadata lacks key {exc.args[0]}") from None
        except ValueError as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"malformed model metadata: {exc}") from None


@dataclass
class ForwardResult:
    """Logits plus the intermediates that saliency and feature export read."""

    logits: Tensor
    visual_features: Tensor
    tactile_features: Tensor
    projected_visual: Tensor
    projected_tactile: Tensor
    fused: Tensor
    aligned: Tensor | None


class ConViTacModel(Module):
    def __init__(self, config: ModelConfig, contrastive: ContrastiveEncoder | None = None):
        self._config = config.validate()
        enc = config.encoder
        self.visual_encoder = ViTEncoder(replace(enc, seed=_derive(config.seed, 1)))
        self.tactile_encoder = ViTEncoder(replace(enc, seed=_derive(config.seed, 2)))
        self.fusion = FusionBlock(enc.dim, config.fusion, np.random.default_rng([config.seed, 3]))
        self.cec = CrossModalAttention(enc.dim, config.cec_heads,
                                       np.random.default_rng([config.seed, 4]),
                                       residual=config.cec_residual)
        self.head = Linear(enc.dim, config.num_classes, np.random.default_rng([config.seed, 5]),
                           std=init_std(enc.dim))
        self._contrastive = None
        if contrastive is not None:
            self.attach_contrastive(contrastive)

    @property
    def config(self) -> ModelConfig:
        return self._config

    @property
    def contrastive(self) -> ContrastiveEncoder | None:
        return self._contrastive

    def attach_contrastive(self, encoder: ContrastiveEncoder) -> None:
        if not encoder.frozen:
            raise ContractError("the contrastive encoder must be frozen before conditioning")
        if encoder.config.dim != self._config.encoder.dim:
            raise ValidationError(
                f"contrastive encoder dim {encoder.config.dim} does not match model dim "
                f"{self._config.encoder.dim}"
            )
        if encoder.config.num_patches != self._config.encoder.num_patches:
            raise ValidationError(
                f"contrastive encoder yields {encoder.config.num_patches} patches, model "
                f"expects {self._config.encoder.num_patches}"
            )
        self._contrastive = encoder

    def trainable_parameters(self) -> list[Tensor]:
        """Everything except the contrastive encoder (kept outside the registry)."""
        return self.parameters()

    def condition_rows(self, visual: np.ndarray, tactile: np.ndarray) -> np.ndarray | None:
        """Full 2N*P x D condition embedding per sample, or None for mode ``none``."""
        if self._config.condition == "none":
            return None
        if self._contrastive is None:
            raise ContractError(
                f"condition mode {self._config.condition!r} needs a frozen contrastive encoder"
            )
        return batch_condition_embedding(self._contrastive, visual, tactile)

    def _queries(self, cond: np.ndarray) -> Tensor:
        rows = self._config.frames * self._config.encoder.num_patches
        expected = (2 * rows, self._config.encoder.dim)
        if tuple(cond.shape[1:]) != expected:
            raise DimensionError(f"condition rows {cond.shape[1:]} do not match {expected}")
        mode = self._config.condition
        if mode == "vision":
            cond = cond[:, :rows]
        elif mode == "touch":
            cond = cond[:, rows:]
        return Tensor(np.ascontiguousarray(cond))

    def encode_modality(self, encoder: ViTEncoder, frames: np.ndarray) -> Tensor:
        """(B, N, H, W, C) -> (B, N*P, D), frame 0's rows first."""
        b, n = frames.shape[:2]
        maps = encoder.encode(frames.reshape((b * n,) + frames.shape[2:]))
        p, d = maps.shape[1:]
        return T.reshape(maps, (b, n * p, d))

    def forward(self, visual: np.ndarray, tactile: np.ndarray,
                cond: np.ndarray | None = None) -> ForwardResult:
        """Batched forward over (B, N, H, W, C) frames.

        ``cond`` is the precomputed full condition embedding (B, 2N*P, D);
        it is computed on the fly when omitted.
        """
        visual, tactile = self._check_frames(visual, tactile)
        if cond is None:
            cond = self.condition_rows(visual, tactile)
        fv = self.encode_modality(self.visual_encoder, visual)
        ft = self.encode_modality(self.tactile_encoder, tactile)
        pv, pt = self.fusion.project(fv, ft)
        fused = fuse(pv, pt, self.fusion.kind, getattr(self.fusion, "gates", None))
        if self._config.condition == "none":
            aligned = None
            pooled = T.mean_pool(fused, axis=1)
        else:
            aligned = align(self._queries(cond), fused, self.cec)
            pooled = T.mean_pool(aligned, axis=1)
        logits = self.head(pooled)
        return ForwardResult(logits, fv, ft, pv, pt, fused, aligned)

    def __call__(self, visual, tactile, cond=None) -> Tensor:
        return self.forward(visual, tactile, cond).logits

    def logits(self, v_frames: np.ndarray, t_frames: np.ndarray) -> np.ndarray:
        """Logits of one sample given its (N, H, W, C) frame stacks."""
        with _no_tape():
            return self.forward(v_frames[None], t_frames[None]).logits.values[0]

    def _check_frames(self, visual, tactile) -> tuple[np.ndarray, np.ndarray]:
        visual = np.asarray(visual, dtype=np.float32)
        tactile = np.asarray(tactile, dtype=np.float32)
        if visual.ndim == 4:
            visual, tactile = visual[:, None], tactile[:, None]
        if visual.ndim != 5 or visual.shape != tactile.shape:
            raise DimensionError(
                f"expected matching (B, N, H, W, C) frames, got {visual.shape} and {tactile.shape}"
            )
        if visual.shape[1] != self._config.frames:
            raise DimensionError(f"model expects {self._config.frames} frames, got {visual.shape[1]}")
        return visual, tactile


def _derive(seed: int, k: int) -> int:
    return int(np.random.default_rng([seed, k]).integers(2**31))


# -------------------------------------------------------------------- datasets

@dataclass
class Split:
    """Arrays of one data split; frames are (M, N, H, W, C)."""

    visual: np.ndarray
    tactile: np.ndarray
    labels: np.ndarray
    masks: np.ndarray | None = None
    cond: np.ndarray | None = None

    def __post_init__(self):
        self.visual = np.asarray(self.visual, dtype=np.float32)
        self.tactile = np.asarray(self.tactile, dtype=np.float32)
        if self.visual.ndim == 4:
            self.visual = self.visual[:, None]
            self.tactile = self.tactile[:, None]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not (len(self.visual) == len(self.tactile) == len(self.labels)):
            raise ValidationError(
                f"split sizes differ: {len(self.visual)} visual, {len(self.tactile)} tactile, "
                f"{len(self.labels)} labels"
            )

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx)
        return Split(self.visual[idx], self.tactile[idx], self.labels[idx],
                     None if self.masks is None else self.masks[idx],
                     None if self.cond is None else self.cond[idx])

    @classmethod
    def from_manifest(cls, path: str | os.PathLike) -> "Split":
        from .synthdata import load_manifest

        v, t, y, m = load_manifest(path).arrays()
        return cls(v, t, y, m)


def attach_condition(split: Split, model: ConViTacModel) -> Split:
    """Cache the frozen encoder's condition rows on the split (computed once)."""
    if split.cond is None and model.config.condition != "none":
        split.cond = model.condition_rows(split.visual, split.tactile)
    return split


# -------------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 16
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ValidationError(f"batch size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValidationError(f"learning rate must be positive, got {self.lr}")
        if self.epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")
        return self


@dataclass
class TrainRecord:
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    eval_acc: list[float] = field(default_factory=list)
    seconds: float = 0.0
    best_epoch: int = 0

    def csv_rows(self) -> list[str]:
        return [
            format_metrics(i + 1, loss, tr, ev)
            for i, (loss, tr, ev) in enumerate(zip(self.train_loss, self.train_acc, self.eval_acc))
        ]


METRICS_HEADER = "epoch,train_loss,train_acc,eval_acc"


def format_metrics(epoch: int, loss: float, train_acc: float, eval_acc: float) -> str:
    return f"{epoch},{loss:.6f},{train_acc:.6f},{eval_acc:.6f}"


def _check_labels(split: Split, num_classes: int) -> None:
    if len(split) == 0:
        raise ValidationError("dataset is empty")
    bad = split.labels[(split.labels < 0) | (split.labels >= num_classes)]
    if len(bad):
        raise ValidationError(f"label {int(bad[0])} outside [0, {num_classes})")


def train_supervised(model: ConViTacModel, train: Split, eval_split: Split | None,
                     config: TrainConfig = TrainConfig(), out_dir: str | os.PathLike | None = None,
                     on_epoch: Callable[[int, TrainRecord], None] | None = None) -> TrainRecord:
    """Cross-entropy training with Adam over shuffled mini-batches.

    When ``out_dir`` is given, ``metrics.csv`` is written there and the
    checkpoint with the best eval accuracy (earliest on ties) is kept under
    ``out_dir/checkpoint``.
    """
    config.validate()
    _check_labels(train, model.config.num_classes)
    if eval_split is not None:
        _check_labels(eval_split, model.config.num_classes)
    attach_condition(train, model)
    if eval_split is not None:
        attach_condition(eval_split, model)
    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(METRICS_HEADER + "\n")
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.trainable_parameters(), lr=config.lr, betas=config.betas, eps=config.eps)
    record = TrainRecord()
    best = -1.0
    start = time.perf_counter()
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        total_loss, correct = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            batch = train.subset(order[lo:lo + config.batch_size])
            with T.Tape() as tape:
                res = model.forward(batch.visual, batch.tactile, batch.cond)
                loss = T.cross_entropy(res.logits, batch.labels)
            tape.backward(loss)
            opt.step()
            opt.zero_grad()
            total_loss += float(loss.values) * len(batch)
            correct += int(np.sum(np.argmax(res.logits.values, axis=1) == batch.labels))
        record.train_loss.append(total_loss / len(train))
        record.train_acc.append(correct / len(train))
        acc = evaluate(model, eval_split) if eval_split is not None else record.train_acc[-1]
        record.eval_acc.append(acc)
        if out is not None:
            with open(out / "metrics.csv", "a") as fh:
                fh.write(record.csv_rows()[-1] + "\n")
        if acc > best:
            best = acc
            record.best_epoch = epoch + 1
            if out is not None:
                save_checkpoint(model, out / "checkpoint", {"epoch": epoch + 1, "eval_acc": acc})
        log.info("epoch %d loss %.4f train %.3f eval %.3f", epoch + 1,
                 record.train_loss[-1], record.train_acc[-1], acc)
        if on_epoch is not None:
            on_epoch(epoch, record)
    record.seconds = time.perf_counter() - start
    return record


def predict(model: ConViTacModel, split: Split, batch_size: int = 64) -> np.ndarray:
    """Logits for every sample, computed without recording gradients."""
    attach_condition(split, model)
    out = []
    with _no_tape():
        for lo in range(0, len(split), batch_size):
            part = split.subset(np.arange(lo, min(lo + batch_size, len(split))))
            out.append(model.forward(part.visual, part.tactile, part.cond).logits.values)
    return np.concatenate(out, axis=0)


def evaluate(model: ConViTacModel, split: Split) -> float:
    """Top-1 accuracy; weights are not touched."""
    _check_labels(split, model.config.num_classes)
    logits = predict(model, split)
    return float(np.mean(np.argmax(logits, axis=1) == split.labels))


# ----------------------------------------------------------------- checkpoints

_PARTS = ("visual_encoder", "tactile_encoder", "fusion", "head")


def save_checkpoint(model: ConViTacModel, path: str | os.PathLike,
                    extra_meta: dict | None = None) -> Path:
    """Write metadata.txt, one directory per component, ``cec/`` and the contrastive encoder."""
    root = Path(path)
    if root.exists():
        shutil.rmtree(root)
    root.mkdir(parents=True)
    meta = model.config.metadata()
    meta.update(extra_meta or {})
    tensorfile.write_metadata(root / "metadata.txt", meta)
    for part in _PARTS:
        tensorfile.save_state(root / part, getattr(model, part).state_dict())
    model.cec.save(root / "cec")
    if model.contrastive is not None:
        model.contrastive.save(root / "contrastive")
    return root


def load_checkpoint(path: str | os.PathLike) -> ConViTacModel:
    root = Path(path)
    if not (root / "metadata.txt").exists():
        raise LoadError(f"{root} is not a checkpoint directory (no metadata.txt)")
    config = ModelConfig.from_metadata(tensorfile.read_metadata(root / "metadata.txt"))
    contrastive = None
    if (root / "contrastive").exists():
        contrastive = ContrastiveEncoder.load(root / "contrastive")
    elif config.condition != "none":
        raise ValidationError(f"{root}: condition {config.condition!r} needs a contrastive/ encoder")
    model = ConViTacModel(config)
    if contrastive is not None:
        model.attach_contrastive(contrastive)
    for part in _PARTS:
        module = getattr(model, part)
        names = [n for n, _ in module.named_parameters()]
        try:
            module.load_state_dict(tensorfile.load_state(root / part, names))
        except DimensionError as exc:
            raise ValidationError(f"{root / part}: tensors disagree with metadata: {exc}") from None
    try:
        model.cec.load(root / "cec")
    except DimensionError as exc:
        raise ValidationError(f"{root / 'cec'}: tensors disagree with metadata: {exc}") from None
    return model
