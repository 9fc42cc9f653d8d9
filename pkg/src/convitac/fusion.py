"""Frame stacking, per-modality projections and the pluggable fusion operator."""

from __future__ import annotations

import enum
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import DimensionError, ValidationError
from .layers import Linear, Module, init_std, param
from .tensor import Tensor


class FusionKind(enum.Enum):
    ADD = "add"
    CONCAT = "concat"
    SWS = "sws"

    @classmethod
    def parse(cls, kind) -> "FusionKind":
        if isinstance(kind, cls):
            return kind
        try:
            return cls(str(kind).lower())
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise ValidationError(f"unknown fusion kind {kind!r}; expected one of {names}") from None


def fused_rows(kind: FusionKind, rows_per_modality: int) -> int:
    """Row count of the fused feature for ``rows_per_modality`` = N*P."""
    return 2 * rows_per_modality if FusionKind.parse(kind) is FusionKind.CONCAT else rows_per_modality


def stack_frames(features: Sequence[Tensor]) -> Tensor:
    """Concatenate N per-frame P x D maps into N*P x D, frame 0 first.

    Batched maps (B x P x D) are stacked along the row axis of each sample.
    """
    features = list(features)
    if not features:
        raise ValidationError("need at least one frame to stack")
    first = features[0].shape
    for i, f in enumerate(features):
        if f.shape != first:
            raise DimensionError(f"frame {i} has shape {f.shape}, frame 0 has {first}")
    return T.concat(features, axis=features[0].ndim - 2)


def modality_project(stacked: Tensor, projection: Linear) -> Tensor:
    """Token-wise affine D -> D map applied to every row."""
    dim = projection.weight.shape[0]
    if stacked.shape[-1] != dim:
        raise DimensionError(f"features of width {stacked.shape[-1]} do not match projection {dim}")
    return projection(stacked)


def sws_weights(gates: Tensor) -> Tensor:
    """Softmax of the two scalar gates: convex weights (visual, tactile)."""
    return T.softmax(gates, axis=0)


def fuse(pv: Tensor, pt: Tensor, kind, gates: Tensor | None = None) -> Tensor:
    """Combine projected visual and tactile rows.

    Add sums them; Concat stacks visual rows then tactile rows; SWS takes the
    softmax(gates)-weighted sum.
    """
    kind = FusionKind.parse(kind)
    if pv.shape != pt.shape:
        raise DimensionError(f"visual rows {pv.shape} and tactile rows {pt.shape} differ")
    if kind is FusionKind.ADD:
        return T.add(pv, pt)
    if kind is FusionKind.CONCAT:
        return T.concat([pv, pt], axis=pv.ndim - 2)
    if gates is None or gates.shape != (2,):
        raise ValidationError("SWS fusion needs a gate tensor of shape (2,)")
    w_v, w_t = T.split(sws_weights(gates), [1, 1], axis=0)
    return T.add(T.mul(pv, w_v), T.mul(pt, w_t))


class FusionBlock(Module):
    """Holds L_v, L_t and (for SWS) the two gate logits."""

    def __init__(self, dim: int, kind, rng: np.random.Generator):
        self._kind = FusionKind.parse(kind)
        std = init_std(dim)
        self.l_v = Linear(dim, dim, rng, std=std)
        self.l_t = Linear(dim, dim, rng, std=std)
        if self._kind is FusionKind.SWS:
            self.gates = param(np.zeros(2, dtype=np.float32))

    @property
    def kind(self) -> FusionKind:
        return self._kind

    def project(self, fv: Tensor, ft: Tensor) -> tuple[Tensor, Tensor]:
        return modality_project(fv, self.l_v), modality_project(ft, self.l_t)

    def __call__(self, fv: Tensor, ft: Tensor) -> Tensor:
        pv, pt = self.project(fv, ft)
        return fuse(pv, pt, self._kind, getattr(self, "gates", None))
