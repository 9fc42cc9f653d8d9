"""Binary ``CVT1`` tensor files and checkpoint directories.

Layout: 4 magic bytes ``CVT1``, one dtype byte (0 = float32), one rank byte,
``rank`` little-endian uint32 dims, then row-major little-endian values.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, LoadError

MAGIC = b"CVT1"
_DTYPES = {0: np.dtype("<f4")}
_CODES = {np.dtype("<f4"): 0}


def encode(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float32)
    arr = np.asarray(arr, dtype="<f4", order="C")
    if arr.ndim > 255:
        raise FormatError(f"rank {arr.ndim} does not fit in one byte")
    header = MAGIC + struct.pack("<BB", _CODES[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def decode(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic, not a CVT1 tensor file")
    code, rank = struct.unpack_from("<BB", blob, 4)
    if code not in _DTYPES:
        raise FormatError(f"{source}: unknown dtype code {code}")
    offset = 6 + 4 * rank
    if len(blob) < offset:
        raise FormatError(f"{source}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", blob, 6)
    dtype = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64))
    expected = offset + count * dtype.itemsize
    if len(blob) != expected:
        raise FormatError(
            f"{source}: expected {expected} bytes for shape {tuple(dims)}, found {len(blob)}"
        )
    return np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(dims).astype(
        np.float32
    )


def save_tensor(path: str | os.PathLike, array: np.ndarray) -> None:
    Path(path).write_bytes(encode(array))


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read tensor file {path}: {exc.strerror}") from exc
    return decode(blob, str(path))


def write_metadata(path: str | os.PathLike, meta: dict) -> None:
    lines = [f"{k}={_fmt(v)}" for k, v in meta.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def read_metadata(path: str | os.PathLike) -> dict[str, str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise LoadError(f"cannot read metadata {path}: {exc.strerror}") from exc
    meta = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        meta[key.strip()] = value.strip()
    return meta


def save_state(directory: str | os.PathLike, state: dict[str, np.ndarray]) -> None:
    """One ``<name>.cvt`` file per tensor; '/' in a name makes a subdirectory."""
    root = Path(directory)
    for name, arr in state.items():
        target = root / f"{name}.cvt"
        target.parent.mkdir(parents=True, exist_ok=True)
        save_tensor(target, arr)


def load_state(directory: str | os.PathLike, names) -> dict[str, np.ndarray]:
    root = Path(directory)
    return {name: load_tensor(root / f"{name}.cvt") for name in names}
