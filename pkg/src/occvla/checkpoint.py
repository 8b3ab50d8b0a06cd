"""Binary checkpoints of named tensors.

Layout (little-endian):

* magic ``b"OVCK"`` and u32 format version
* u32 length + UTF-8 JSON header (config echo, optimizer hyperparameters,
  RNG state, step counters)
* u32 entry count, then per entry: u16 name length + UTF-8 name, u8 dtype
  length + numpy dtype string, u8 ndim, ``ndim`` u32 dims, u64 byte count,
  raw C-order bytes
* 32-byte SHA-256 of everything before it
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import ChecksumError, FormatError, VersionError

MAGIC = b"OVCK"
VERSION = 1
_DTYPES = {"<f4", "<f8", "<i8", "<i4", "|u1", "<u4", "|b1"}


def encode(tensors: dict, header: dict | None = None, version: int = VERSION) -> bytes:
    parts = [MAGIC, struct.pack("<I", version)]
    head = json.dumps(header or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts += [struct.pack("<I", len(head)), head, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.require(tensors[name], requirements="C")
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        arr = arr.astype(dt, copy=False)
        code = dt.str
        if code not in _DTYPES:
            raise FormatError(f"tensor {name!r}: unsupported dtype {code}")
        nb = name.encode("utf-8")
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<B", len(code)), code.encode("ascii")]
        parts += [struct.pack("<B", arr.ndim), struct.pack(f"<{arr.ndim}I", *arr.shape)]
        raw = arr.tobytes()
        parts += [struct.pack("<Q", len(raw)), raw]
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


class _Cursor:
    def __init__(self, buf: bytes, end: int):
        self.buf, self.pos, self.end = buf, 0, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise FormatError(f"checkpoint truncated at offset {self.pos} (needed {n} bytes)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals if len(vals) > 1 else vals[0]


def decode(buf: bytes) -> tuple[dict, dict]:
    """Return ``(tensors, header)``."""
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    if len(buf) < len(MAGIC) + 4 + 32:
        raise FormatError("checkpoint truncated")
    version = struct.unpack("<I", buf[len(MAGIC) : len(MAGIC) + 4])[0]
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    body, digest = buf[:-32], buf[-32:]
    cur = _Cursor(buf, len(body))
    cur.take(len(MAGIC) + 4)
    try:
        header = json.loads(cur.take(cur.unpack("<I")).decode("utf-8"))
        count = cur.unpack("<I")
        tensors = {}
        for _ in range(count):
            name = cur.take(cur.unpack("<H")).decode("utf-8")
            code = cur.take(cur.unpack("<B")).decode("ascii")
            if code not in _DTYPES:
                raise FormatError(f"tensor {name!r}: unsupported dtype {code!r}")
            ndim = cur.unpack("<B")
            shape = cur.unpack(f"<{ndim}I") if ndim else ()
            shape = (shape,) if isinstance(shape, int) else tuple(shape)
            nbytes = cur.unpack("<Q")
            raw = cur.take(nbytes)
            if name in tensors:
                raise FormatError(f"duplicate tensor name {name!r}")
            dt = np.dtype(code)
            if nbytes != dt.itemsize * int(np.prod(shape, dtype=np.int64)):
                raise FormatError(f"tensor {name!r}: byte count {nbytes} does not match shape {shape}")
            tensors[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        if hashlib.sha256(body).digest() != digest:
            raise ChecksumError("checkpoint checksum mismatch") from exc
        raise FormatError("malformed checkpoint header") from exc
    except FormatError:
        if hashlib.sha256(body).digest() != digest:
            raise ChecksumError("checkpoint checksum mismatch (corrupted or truncated)") from None
        raise
    if cur.pos != len(body):
        raise FormatError(f"{len(body) - cur.pos} unexpected bytes after the last tensor")
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checkpoint checksum mismatch")
    return tensors, header


def save(path, tensors: dict, header: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(tensors, header))
    os.replace(tmp, path)


def load(path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return decode(path.read_bytes())
