"""Contrastive pretraining of the shared visual-tactile encoder and condition embeddings.

A single encoder sees both modalities. Pooled, L2-normalized projections feed
the temperature-scaled similarity matrix and NT-Xent loss; the un-pooled
patch maps form the condition embedding once the encoder is frozen.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from . import tensorfile
from .errors import ContractError, DimensionError, ValidationError
from .layers import Module, init_std, param, trunc_normal
from .optim import Adam
from .tensor import Tensor
from .vit import EncoderConfig, ViTEncoder

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.07


class ContrastiveEncoder(Module):
    """ViT backbone plus a mean-pool -> linear -> L2-normalize projection head."""

    def __init__(self, config: EncoderConfig, proj_dim: int | None = None):
        self.vit = ViTEncoder(config)
        rng = np.random.default_rng([config.seed, 7])
        self.projection_head = param(
            trunc_normal(rng, (config.dim, proj_dim or config.dim), init_std(config.dim))
        )
        self._frozen = False

    @property
    def config(self) -> EncoderConfig:
        return self.vit.config

    @property
    def frozen(self) -> bool:
        return self._frozen

    def project(self, images) -> tuple[Tensor, Tensor]:
        """Return (patch_map, pooled unit vector) for one image or a batch."""
        patch_map = self.vit.encode(images)
        pooled = T.mean_pool(patch_map, axis=patch_map.ndim - 2)
        if pooled.ndim == 1:
            pooled = T.reshape(pooled, (1, -1))
            return patch_map, T.reshape(
                T.l2_normalize(T.matmul(pooled, self.projection_head)), (-1,)
            )
        return patch_map, T.l2_normalize(T.matmul(pooled, self.projection_head), axis=-1)

    def patch_maps(self, images: np.ndarray) -> np.ndarray:
        """Patch maps without recording, in chunks to bound memory."""
        images = np.asarray(images, dtype=np.float32)
        out = []
        with _no_tape():
            for start in range(0, len(images), 128):
                out.append(self.vit.encode(images[start:start + 128]).values)
        return np.concatenate(out, axis=0)

    def embed_pooled(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        out = []
        with _no_tape():
            for start in range(0, len(images), 128):
                out.append(self.project(images[start:start + 128])[1].values)
        return np.concatenate(out, axis=0)

    def save(self, directory: str | os.PathLike) -> None:
        root = Path(directory)
        self.vit.save(root, {"frozen": self._frozen, "proj_dim": self.projection_head.shape[1]})
        tensorfile.save_tensor(root / "projection_head.cvt", self.projection_head.values)

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "ContrastiveEncoder":
        root = Path(directory)
        meta = tensorfile.read_metadata(root / "metadata.txt")
        config = EncoderConfig.from_metadata(meta)
        enc = cls(config, int(meta.get("proj_dim", config.dim)))
        enc.vit = ViTEncoder.load(root)
        head = tensorfile.load_tensor(root / "projection_head.cvt")
        if head.shape != enc.projection_head.shape:
            raise DimensionError(
                f"projection_head has shape {head.shape}, metadata implies "
                f"{enc.projection_head.shape}"
            )
        enc.projection_head.values = head
        if meta.get("frozen", "false") == "true":
            freeze(enc)
        return enc


class _no_tape:
    """Run ops without recording even if an outer tape is active."""

    def __enter__(self):
        self._token = T._ACTIVE_TAPE.set(None)

    def __exit__(self, *exc):
        T._ACTIVE_TAPE.reset(self._token)


def freeze(encoder: ContrastiveEncoder) -> ContrastiveEncoder:
    """Mark the encoder frozen: no parameter receives gradients or updates afterwards."""
    encoder._frozen = True
    for p in encoder.parameters():
        p.requires_grad = False
        p.grad = None
    return encoder


def condition_embedding(encoder: ContrastiveEncoder, v_frames: Sequence[np.ndarray],
                        t_frames: Sequence[np.ndarray]) -> Tensor:
    """Stack per-frame patch maps, visual frames then tactile frames: 2N x P x D."""
    v_frames, t_frames = list(v_frames), list(t_frames)
    if len(v_frames) != len(t_frames) or not v_frames:
        raise ValidationError(
            f"need N >= 1 visual and tactile frames of equal count, got "
            f"{len(v_frames)} and {len(t_frames)}"
        )
    frames = np.stack([np.asarray(f, dtype=np.float32) for f in v_frames + t_frames])
    return encoder.vit.encode(frames)


def batch_condition_embedding(encoder: ContrastiveEncoder, visual: np.ndarray,
                              tactile: np.ndarray) -> np.ndarray:
    """Condition rows for a batch of samples.

    ``visual``/``tactile`` are (B, N, H, W, C); the result is (B, 2N*P, D) with
    each sample's visual frames first, then its tactile frames.
    """
    b, n = visual.shape[:2]
    flat_v = encoder.patch_maps(visual.reshape((b * n,) + visual.shape[2:]))
    flat_t = encoder.patch_maps(tactile.reshape((b * n,) + tactile.shape[2:]))
    p, d = flat_v.shape[1:]
    return np.concatenate(
        [flat_v.reshape(b, n * p, d), flat_t.reshape(b, n * p, d)], axis=1
    )


def similarity_matrix(pooled: Tensor, tau: float = DEFAULT_TAU) -> Tensor:
    """Pairwise dot products divided by ``tau`` with the diagonal set to -inf."""
    if tau <= 0:
        raise ValidationError(f"temperature must be positive, got {tau}")
    if pooled.ndim != 2:
        raise DimensionError(f"expected 2B x D pooled embeddings, got {pooled.shape}")
    e = pooled.values
    s = (e @ e.T) / e.dtype.type(tau)
    n = s.shape[0]
    diag = np.arange(n)
    s[diag, diag] = -np.inf

    def back(g):
        g = g.copy()
        g[diag, diag] = 0.0
        return (((g + g.T) @ e) / tau,)

    return T.record(s, (pooled,), back)


def positive_index(i: int, batch: int) -> int:
    """0-based partner of row i: visual i <-> tactile i + B, wrapping modulo 2B."""
    return (i + batch) % (2 * batch)


def nt_xent_loss(sim: Tensor, batch: int) -> Tensor:
    """Sum over all 2B rows of -log softmax(row)[partner].

    The row log-sum-exp runs over the whole row; the -inf diagonal is what
    excludes self-similarity.
    """
    if batch < 1:
        raise ValidationError(f"batch size must be >= 1, got {batch}")
    if sim.shape != (2 * batch, 2 * batch):
        raise DimensionError(f"similarity matrix {sim.shape} does not match 2B = {2 * batch}")
    s = sim.values
    rows = np.arange(2 * batch)
    pos = (rows + batch) % (2 * batch)
    lse = T.logsumexp(s, axis=1, keepdims=True)
    logp = s - lse
    loss = 0.0 - logp[rows, pos].sum()  # +0.0 rather than -0.0 when B = 1

    def back(g):
        d = np.exp(logp)
        d[rows, pos] -= 1.0
        return (d * g,)

    return T.record(np.asarray(loss, dtype=s.dtype), (sim,), back)


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 12
    batch_size: int = 16
    lr: float = 5e-4
    tau: float = DEFAULT_TAU
    seed: int = 0


@dataclass
class PretrainRecord:
    loss: list[float]
    train_retrieval: list[float]
    eval_retrieval: list[float]
    seconds: float = 0.0


def _as_frames(images: np.ndarray) -> np.ndarray:
    """Accept (M, H, W, C) or (M, N, H, W, C); pretraining uses every frame."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 5:
        return images.reshape((-1,) + images.shape[2:])
    return images


def pretrain(encoder: ContrastiveEncoder, visual: np.ndarray, tactile: np.ndarray,
             config: PretrainConfig = PretrainConfig(),
             eval_pairs: tuple | None = None,
             on_epoch=None) -> PretrainRecord:
    """Minimize NT-Xent over shuffled batches of cross-modal (visual, tactile) pairs.

    The positive for each visual image is its own tactile image and vice
    versa; there are no augmentations. Batches of size 1 carry no signal and
    are skipped. ``eval_pairs`` is ``(visual, tactile)`` or
    ``(visual, tactile, labels)``; with labels the recorded eval retrieval
    counts same-class hits.
    """
    import time

    if encoder.frozen:
        raise ContractError("cannot pretrain a frozen contrastive encoder")
    visual, tactile = _as_frames(visual), _as_frames(tactile)
    if len(visual) == 0:
        raise ValidationError("pretraining dataset is empty")
    if len(visual) != len(tactile):
        raise ValidationError(f"{len(visual)} visual but {len(tactile)} tactile images")
    encoder.vit.check_images(visual)
    encoder.vit.check_images(tactile)
    rng = np.random.default_rng(config.seed)
    opt = Adam(encoder.parameters(), lr=config.lr)
    record = PretrainRecord([], [], [])
    start = time.perf_counter()
    for epoch in range(config.epochs):
        order = rng.permutation(len(visual))
        losses = []
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            if len(idx) < 2:
                continue
            both = np.concatenate([visual[idx], tactile[idx]], axis=0)
            with T.Tape() as tape:
                _, pooled = encoder.project(both)
                loss = nt_xent_loss(similarity_matrix(pooled, config.tau), len(idx))
            tape.backward(loss)
            opt.step()
            opt.zero_grad()
            losses.append(float(loss.values) / (2 * len(idx)))
        record.loss.append(float(np.mean(losses)))
        record.train_retrieval.append(retrieval_accuracy(encoder, visual, tactile))
        if eval_pairs is not None:
            record.eval_retrieval.append(retrieval_accuracy(encoder, *eval_pairs))
        log.info("pretrain epoch %d loss %.4f", epoch + 1, record.loss[-1])
        if on_epoch is not None:
            on_epoch(epoch, record)
    record.seconds = time.perf_counter() - start
    return record


def retrieval_accuracy(encoder: ContrastiveEncoder, visual: np.ndarray, tactile: np.ndarray,
                       labels: Sequence[int] | None = None) -> float:
    """Top-1 cross-modal retrieval by exhaustive nearest-neighbour scan.

    For every visual embedding the most similar tactile embedding is found. A
    hit means it is the paired sample, or, when ``labels`` are given, a sample
    of the same class.
    """
    ev = encoder.embed_pooled(_as_frames(visual))
    et = encoder.embed_pooled(_as_frames(tactile))
    best = np.argmax(ev @ et.T, axis=1)
    if labels is None:
        return float(np.mean(best == np.arange(len(ev))))
    labels = np.asarray(labels)
    return float(np.mean(labels[best] == labels))
