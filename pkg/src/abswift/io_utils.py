"""Little-endian binary container helpers shared by sample and weight files.

Arrays are stored as a 64-bit little-endian element count followed by 32-bit
IEEE-754 little-endian values. Scalars embedded in text headers use
float.hex() so round trips are bit-exact.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np


class DataFormatError(ValueError):
    """Raised on bad magic, truncation, or inconsistent headers."""


def write_f32_array(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    f.write(struct.pack("<Q", arr.size))
    f.write(arr.tobytes())


def read_f32_array(f: BinaryIO, expected_size: int | None = None) -> np.ndarray:
    offset = f.tell()
    raw = f.read(8)
    if len(raw) != 8:
        raise DataFormatError(f"truncated array length at byte offset {offset}")
    (size,) = struct.unpack("<Q", raw)
    if expected_size is not None and size != expected_size:
        raise DataFormatError(
            f"array length {size} != declared {expected_size} at byte offset {offset}"
        )
    data = f.read(4 * size)
    if len(data) != 4 * size:
        raise DataFormatError(f"truncated array data at byte offset {offset + 8}")
    return np.frombuffer(data, dtype="<f4").copy()


def write_header(f: BinaryIO, lines: dict[str, str]) -> None:
    """Write sorted key=value lines, length-prefixed (u64 LE), UTF-8."""
    text = "".join(f"{k}={lines[k]}\n" for k in sorted(lines))
    blob = text.encode("utf-8")
    f.write(struct.pack("<Q", len(blob)))
    f.write(blob)


def read_header(f: BinaryIO) -> dict[str, str]:
    offset = f.tell()
    raw = f.read(8)
    if len(raw) != 8:
        raise DataFormatError(f"truncated header length at byte offset {offset}")
    (size,) = struct.unpack("<Q", raw)
    blob = f.read(size)
    if len(blob) != size:
        raise DataFormatError(f"truncated header at byte offset {offset + 8}")
    out = {}
    for line in blob.decode("utf-8").splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        out[key] = value
    return out


def floats_to_hex(values) -> str:
    return ",".join(float(v).hex() for v in np.asarray(values, dtype=np.float64).ravel())


def hex_to_floats(text: str) -> np.ndarray:
    if not text:
        return np.zeros(0, dtype=np.float64)
    return np.array([float.fromhex(t) for t in text.split(",")], dtype=np.float64)
