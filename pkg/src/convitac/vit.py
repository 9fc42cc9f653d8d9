"""Patch-based transformer encoder producing P x D feature maps (no class token)."""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from . import tensorfile
from .errors import DimensionError, ValidationError
from .layers import LayerNorm, Linear, Module, init_std, param, trunc_normal
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    seed: int = 0

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def validate(self) -> "EncoderConfig":
        if self.channels not in (1, 3):
            raise ValidationError(f"channels must be 1 or 3, got {self.channels}")
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ValidationError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise ValidationError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 0 or self.mlp_ratio <= 0:
            raise ValidationError("depth must be >= 0 and mlp_ratio > 0")
        return self

    def metadata(self) -> dict:
        return {
            "patch_size": self.patch_size,
            "dim": self.dim,
            "depth": self.depth,
            "heads": self.heads,
            "seed": self.seed,
            "image_size": self.image_size,
            "channels": self.channels,
            "mlp_ratio": self.mlp_ratio,
        }

    @classmethod
    def from_metadata(cls, meta: dict[str, str]) -> "EncoderConfig":
        try:
            return cls(
                image_size=int(meta.get("image_size", 32)),
                channels=int(meta.get("channels", 3)),
                patch_size=int(meta["patch_size"]),
                dim=int(meta["dim"]),
                depth=int(meta["depth"]),
                heads=int(meta["heads"]),
                mlp_ratio=float(meta.get("mlp_ratio", 4.0)),
                seed=int(meta["seed"]),
            ).validate()
        except KeyError as exc:
            raise ValidationError(f"encoder metadata lacks key {exc.args[0]}") from None


STANDARDIZE_EPS = 1e-3


def _as_image_tensor(images) -> Tensor:
    if isinstance(images, Tensor):
        return images
    return Tensor(np.asarray(images))


def standardize(images: Tensor) -> Tensor:
    """Per-image, per-channel zero mean / unit variance (fixed, not learned)."""
    v = images.values
    axes = (-3, -2)
    mu = v.mean(axis=axes, keepdims=True)
    sd = np.sqrt(((v - mu) ** 2).mean(axis=axes, keepdims=True) + STANDARDIZE_EPS)
    return Tensor._wrap(((v - mu) / sd).astype(v.dtype))


def patchify(images, patch_size: int) -> Tensor:
    """Split H x W x C images into row-major patch rows of length patch_size**2 * C.

    Accepts one image (H, W, C) or a batch (B, H, W, C); the output drops or
    keeps the batch axis accordingly. Within a patch, pixels are row-major and
    channels vary fastest.
    """
    x = _as_image_tensor(images)
    single = x.ndim == 3
    if single:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise DimensionError(f"expected H x W x C image(s), got shape {x.shape}")
    b, h, w, c = x.shape
    p = patch_size
    if p < 1 or h % p or w % p:
        raise ValidationError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = T.reshape(x, (b, gh, p, gw, p, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (b, gh * gw, p * p * c))
    if single:
        x = T.reshape(x, x.shape[1:])
    return x


def embed(patches: Tensor, weight: Tensor, positional: Tensor, bias: Tensor | None = None) -> Tensor:
    """Linear patch projection plus additive positional embedding."""
    if patches.shape[-1] != weight.shape[0]:
        raise DimensionError(f"patch rows {patches.shape} do not match weight {weight.shape}")
    if positional.shape != (patches.shape[-2], weight.shape[1]):
        raise DimensionError(
            f"positional embedding {positional.shape} does not match "
            f"{(patches.shape[-2], weight.shape[1])}"
        )
    out = T.matmul(patches, weight)
    if bias is not None:
        out = T.add(out, bias)
    return T.add(out, positional)


class SelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, std: float = 0.02):
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng, std=std)
        self.proj = Linear(dim, dim, rng, std=std)
        self._last_attention: np.ndarray | None = None

    def __call__(self, x: Tensor) -> Tensor:
        b, n, dim = x.shape
        h = self.heads
        d = dim // h
        qkv = T.reshape(self.qkv(x), (b, n, 3, h, d))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))
        q, k, v = (T.reshape(t, (b, h, n, d)) for t in T.split(qkv, [1, 1, 1], axis=0))
        scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(d))
        attn = T.softmax(scores, axis=-1)
        self._last_attention = attn.values
        out = T.matmul(attn, v)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, n, dim))
        return self.proj(out)


class EncoderBlock(Module):
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator,
                 std: float = 0.02):
        hidden = max(1, int(round(dim * mlp_ratio)))
        self.norm1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng, std)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, hidden, rng, std=std)
        self.fc2 = Linear(hidden, dim, rng, std=std)

    def __call__(self, x: Tensor) -> Tensor:
        single = x.ndim == 2
        if single:
            x = T.reshape(x, (1,) + x.shape)
        x = T.add(x, self.attn(self.norm1(x)))
        x = T.add(x, self.fc2(T.gelu(self.fc1(self.norm2(x)))))
        if single:
            x = T.reshape(x, x.shape[1:])
        return x

    @property
    def last_attention(self) -> np.ndarray | None:
        return self.attn._last_attention


class ViTEncoder(Module):
    """patchify -> embed -> depth x EncoderBlock, seeded initialization."""

    def __init__(self, config: EncoderConfig):
        self._config = config.validate()
        rng = np.random.default_rng(config.seed)
        std = init_std(config.dim)
        self.patch_weight = param(trunc_normal(rng, (config.patch_dim, config.dim), std))
        self.patch_bias = param(np.zeros(config.dim, dtype=np.float32))
        self.pos_embed = param(trunc_normal(rng, (config.num_patches, config.dim), std))
        self.blocks = [
            EncoderBlock(config.dim, config.heads, config.mlp_ratio, rng, std)
            for _ in range(config.depth)
        ]

    @property
    def config(self) -> EncoderConfig:
        return self._config

    def check_images(self, images: np.ndarray) -> None:
        cfg = self._config
        expected = (cfg.image_size, cfg.image_size, cfg.channels)
        if tuple(images.shape[-3:]) != expected:
            raise ValidationError(
                f"image shape {tuple(images.shape[-3:])} does not match expected "
                f"{expected[0]}x{expected[1]}x{expected[2]}"
            )

    def __call__(self, images) -> Tensor:
        return self.encode(images)

    def encode(self, images) -> Tensor:
        x = _as_image_tensor(images)
        self.check_images(x.values)
        x = standardize(x)
        x = embed(patchify(x, self._config.patch_size), self.patch_weight, self.pos_embed,
                  self.patch_bias)
        for block in self.blocks:
            x = block(x)
        return x

    def save(self, directory: str | os.PathLike, extra_meta: dict | None = None) -> None:
        root = Path(directory)
        root.mkdir(parents=True, exist_ok=True)
        tensorfile.save_state(root, self.state_dict())
        meta = self._config.metadata()
        meta.update(extra_meta or {})
        tensorfile.write_metadata(root / "metadata.txt", meta)

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "ViTEncoder":
        root = Path(directory)
        config = EncoderConfig.from_metadata(tensorfile.read_metadata(root / "metadata.txt"))
        enc = cls(config)
        enc.load_state_dict(tensorfile.load_state(root, [n for n, _ in enc.named_parameters()]))
        return enc


def encode(image, config: EncoderConfig) -> Tensor:
    """Encode with freshly initialized weights drawn from ``config.seed``."""
    return ViTEncoder(config).encode(image)


def config_dict(config: EncoderConfig) -> dict:
    return asdict(config)
