"""Little-endian float32 matrix container shared by event files and the spectrogram cache.

Layout: 8 magic bytes, uint32 rows, uint32 cols, then rows*cols float32 values in row-major order.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

EVENT_MAGIC = b"AKNS0001"
SPEC_MAGIC = b"SPEC0001"

_HEADER = struct.Struct("<8sII")


class MatrixFormatError(ValueError):
    pass


def encode_matrix(values: np.ndarray, magic: bytes) -> bytes:
    if values.ndim != 2:
        raise MatrixFormatError(f"expected a 2-d matrix, got shape {values.shape}")
    rows, cols = values.shape
    body = np.ascontiguousarray(values, dtype="<f4").tobytes()
    return _HEADER.pack(magic, rows, cols) + body


def decode_matrix(blob: bytes, magic: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise MatrixFormatError("truncated header")
    found, rows, cols = _HEADER.unpack_from(blob)
    if found != magic:
        raise MatrixFormatError(f"bad magic {found!r}, expected {magic!r}")
    expected = _HEADER.size + 4 * rows * cols
    if len(blob) != expected:
        raise MatrixFormatError(f"payload is {len(blob)} bytes, header implies {expected}")
    values = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(rows, cols)
    return values.astype(np.float32)


def write_matrix(path: str | os.PathLike, values: np.ndarray, magic: bytes) -> None:
    """Write atomically: a temp file in the target directory is renamed into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(encode_matrix(values, magic))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_matrix(path: str | os.PathLike, magic: bytes) -> np.ndarray:
    return decode_matrix(Path(path).read_bytes(), magic)
