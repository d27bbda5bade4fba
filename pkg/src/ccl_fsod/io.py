"""File formats shared across the package.

Binary matrix layout (little-endian)::

    offset 0   4 bytes   magic  b"FMAT"
    offset 4   8 bytes   rows   uint64
    offset 12  8 bytes   cols   uint64
    offset 20  rows*cols*8 bytes float64, row-major

A CSV fallback (comma separated, no header) is accepted wherever a binary
matrix is read; the format is picked from the file suffix.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FMAT"
_HEADER = struct.Struct("<4sQQ")


class FormatError(ValueError):
    """Raised when a file does not follow the expected layout."""


def write_matrix(path, matrix) -> None:
    path = Path(path)
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    if matrix.ndim != 2:
        raise FormatError(f"{path}: expected a 2-d matrix, got shape {matrix.shape}")
    if path.suffix == ".csv":
        np.savetxt(path, matrix, delimiter=",", fmt="%.17g")
        return
    rows, cols = matrix.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, rows, cols))
        fh.write(np.ascontiguousarray(matrix, dtype="<f8").tobytes())


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".csv":
        return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    payload = raw[_HEADER.size:]
    if len(payload) != rows * cols * 8:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, header says {rows}x{cols}")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)


def find_matrix(directory, stem: str) -> Path:
    """Locate ``stem.bin`` or ``stem.csv`` inside ``directory``."""
    directory = Path(directory)
    for suffix in (".bin", ".csv"):
        candidate = directory / f"{stem}{suffix}"
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"no {stem}.bin or {stem}.csv in {directory}")


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_json(path):
    return json.loads(Path(path).read_text())


def save_image(path, array) -> None:
    """Write a uint8 grid as PGM (2-d) or PPM (H x W x 3)."""
    from PIL import Image

    array = np.asarray(array)
    if array.dtype != np.uint8:
        array = np.clip(np.rint(array), 0, 255).astype(np.uint8)
    Image.fromarray(array).save(path)


def map_to_gray(values) -> np.ndarray:
    """Scale a nonnegative map so its max becomes 255 (zeros stay black)."""
    values = np.asarray(values, dtype=np.float64)
    peak = values.max() if values.size else 0.0
    if peak <= 0:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.clip(np.rint(values / peak * 255.0), 0, 255).astype(np.uint8)
