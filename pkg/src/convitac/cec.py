"""Cross-modal multi-head attention: condition rows query the fused feature."""

from __future__ import annotations

import math
import os
from pathlib import Path

import numpy as np

from . import tensor as T
from . import tensorfile
from .errors import DimensionError, ValidationError
from .layers import Module, init_std, param, trunc_normal
from .tensor import Tensor


class AttentionHead(Module):
    """One head's query/key/value maps, each D x d with no bias."""

    def __init__(self, dim: int, head_dim: int, rng: np.random.Generator, std: float):
        self.wq = param(trunc_normal(rng, (dim, head_dim), std))
        self.wk = param(trunc_normal(rng, (dim, head_dim), std))
        self.wv = param(trunc_normal(rng, (dim, head_dim), std))
        self._last_attention: np.ndarray | None = None


def cross_modal_head(e: Tensor, f: Tensor, head: AttentionHead) -> Tensor:
    """softmax(q k^T / sqrt(d)) v with q from ``e`` and k, v from ``f``.

    Works on single sequences (L x D) or batches (B x L x D). The attention
    matrix of the last call is kept on the head for inspection.
    """
    dim = head.wq.shape[0]
    if e.shape[-1] != dim or f.shape[-1] != dim:
        raise DimensionError(
            f"query rows {e.shape} and key rows {f.shape} must both have width {dim}"
        )
    if e.ndim != f.ndim or (e.ndim == 3 and e.shape[0] != f.shape[0]):
        raise DimensionError(f"query batch {e.shape} does not match key batch {f.shape}")
    d = head.wq.shape[1]
    q = T.matmul(e, head.wq)
    k = T.matmul(f, head.wk)
    v = T.matmul(f, head.wv)
    scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(d))
    attn = T.softmax(scores, axis=-1)
    head._last_attention = attn.values
    return T.matmul(attn, v)


class CrossModalAttention(Module):
    """h independent heads, concatenated and mapped back to D by ``w0``."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 residual: bool = False):
        if heads < 1 or dim % heads:
            raise ValidationError(f"dim {dim} not divisible by heads {heads}")
        std = init_std(dim)
        self.heads = [AttentionHead(dim, dim // heads, rng, std) for _ in range(heads)]
        self.w0 = param(trunc_normal(rng, (dim, dim), std))
        self._residual = residual

    @property
    def num_heads(self) -> int:
        return len(self.heads)

    @property
    def residual(self) -> bool:
        return self._residual

    def attention_maps(self) -> list[np.ndarray]:
        """Attention matrices from the most recent call, one per head."""
        return [h._last_attention for h in self.heads]

    def __call__(self, e_p: Tensor, f_f: Tensor) -> Tensor:
        return align(e_p, f_f, self)

    def save(self, directory: str | os.PathLike) -> None:
        root = Path(directory)
        root.mkdir(parents=True, exist_ok=True)
        for i, head in enumerate(self.heads):
            for name in ("wq", "wk", "wv"):
                tensorfile.save_tensor(root / f"head{i}_{name}.cvt", getattr(head, name).values)
        tensorfile.save_tensor(root / "w0.cvt", self.w0.values)

    def load(self, directory: str | os.PathLike) -> None:
        root = Path(directory)
        for i, head in enumerate(self.heads):
            for name in ("wq", "wk", "wv"):
                _load_into(getattr(head, name), root / f"head{i}_{name}.cvt")
        _load_into(self.w0, root / "w0.cvt")


def _load_into(target: Tensor, path: Path) -> None:
    arr = tensorfile.load_tensor(path)
    if arr.shape != target.shape:
        raise DimensionError(f"{path.name}: expected shape {target.shape}, file has {arr.shape}")
    target.values = arr.astype(target.dtype, copy=True)


def align(e_p: Tensor, f_f: Tensor, attention: CrossModalAttention) -> Tensor:
    """Concatenate every head's output along features and project by w0.

    The output keeps the query length. With the residual option the
    condition rows are added back onto the result.
    """
    outs = [cross_modal_head(e_p, f_f, head) for head in attention.heads]
    joined = outs[0] if len(outs) == 1 else T.concat(outs, axis=e_p.ndim - 1)
    out = T.matmul(joined, attention.w0)
    if attention.residual:
        out = T.add(out, e_p)
    return out
