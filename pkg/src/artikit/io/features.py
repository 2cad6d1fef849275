"""Condition-token feature files: ``AKFT`` | u32 count | u32 dim | float32 LE row-major."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError

MAGIC = b"AKFT"
_HEADER = struct.Struct("<4sII")


def save_features(path, tokens) -> None:
    arr = np.asarray(tokens, dtype="<f4")
    if arr.ndim != 2:
        raise FormatError("feature matrix must be 2-D (count x dim)")
    Path(path).write_bytes(_HEADER.pack(MAGIC, arr.shape[0], arr.shape[1]) + arr.tobytes(order="C"))


def load_features(path) -> np.ndarray:
    """Read a feature file, widened to float64."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, count, dim = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    expected = count * dim * 4
    payload = data[_HEADER.size:]
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(count, dim).astype(np.float64)
