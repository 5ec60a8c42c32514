"""MFT1 binary tensor files.

Layout: ``b"MFT1"``, one ``u8`` rank, ``rank`` little-endian ``u32`` dims,
then the row-major little-endian float32 payload. No padding.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import DataError

MAGIC = b"MFT1"


def encode(tensor: Tensor | np.ndarray) -> bytes:
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    if not 1 <= arr.ndim <= 255:
        raise ValueError(f"MFT1 supports ranks 1..255, got {arr.ndim}")
    header = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode(blob: bytes, source: str = "<bytes>") -> Tensor:
    if blob[:4] != MAGIC:
        raise DataError(f"{source}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 5:
        raise DataError(f"{source}: truncated header")
    rank = blob[4]
    head = 5 + 4 * rank
    if rank == 0 or len(blob) < head:
        raise DataError(f"{source}: invalid rank {rank} or truncated header")
    shape = struct.unpack(f"<{rank}I", blob[5:head])
    count = int(np.prod(shape))
    if len(blob) - head != 4 * count:
        raise DataError(f"{source}: payload is {len(blob) - head} bytes, shape {shape} needs {4 * count}")
    if count == 0:
        raise DataError(f"{source}: zero-size dimension in shape {shape}")
    arr = np.frombuffer(blob, dtype="<f4", count=count, offset=head).astype(np.float32).reshape(shape)
    return Tensor._wrap(arr)


def save(path: str | Path, tensor: Tensor | np.ndarray) -> None:
    Path(path).write_bytes(encode(tensor))


def load(path: str | Path) -> Tensor:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read tensor file {path}: {exc.strerror}") from exc
    return decode(blob, str(path))
