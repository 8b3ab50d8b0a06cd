"""OCCGRID v1 text-header grid dumps.

A dump is the ASCII line ``OCCGRID v1 H W D K`` followed by ``H*W*D`` class
bytes with index ``((h*W)+w)*D + d``.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError, VersionError

MAGIC = b"OCCGRID"
VERSION = "v1"


def dump_bytes(grid: np.ndarray, num_classes: int = 8) -> bytes:
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise FormatError(f"occupancy grid must be 3-D, got shape {grid.shape}")
    if grid.size and (grid.min() < 0 or grid.max() >= num_classes):
        raise FormatError(f"voxel classes must lie in [0, {num_classes})")
    h, w, d = grid.shape
    header = f"OCCGRID {VERSION} {h} {w} {d} {num_classes}\n".encode("ascii")
    return header + np.ascontiguousarray(grid, dtype=np.uint8).tobytes()


def parse_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int, int]:
    """Parse a dump starting at ``offset``; returns (grid, num_classes, end offset)."""
    nl = buf.find(b"\n", offset, offset + 64)
    if nl < 0:
        raise FormatError("missing OCCGRID header line")
    parts = buf[offset:nl].split()
    if len(parts) != 6 or parts[0] != MAGIC:
        raise FormatError(f"bad OCCGRID header {buf[offset:nl]!r}")
    if parts[1].decode("ascii", "replace") != VERSION:
        raise VersionError(f"unsupported OCCGRID version {parts[1].decode('ascii', 'replace')!r}")
    try:
        h, w, d, k = (int(p) for p in parts[2:])
    except ValueError as exc:
        raise FormatError(f"bad OCCGRID dimensions {parts[2:]!r}") from exc
    start, end = nl + 1, nl + 1 + h * w * d
    if end > len(buf):
        raise FormatError(f"truncated OCCGRID payload: need {h * w * d} bytes, have {len(buf) - start}")
    grid = np.frombuffer(buf, dtype=np.uint8, count=h * w * d, offset=start).reshape(h, w, d).copy()
    if grid.size and grid.max() >= k:
        raise FormatError(f"voxel class {int(grid.max())} out of range for K={k}")
    return grid, k, end


def save(path, grid: np.ndarray, num_classes: int = 8) -> None:
    with open(path, "wb") as f:
        f.write(dump_bytes(grid, num_classes))


def load(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    grid, _, end = parse_bytes(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after OCCGRID payload")
    return grid
