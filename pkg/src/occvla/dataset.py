"""On-disk episode datasets.

A dataset directory holds ``manifest.json`` and one ``ep_<id>.bin`` per
episode.  Record layout (all integers little-endian):

* magic ``b"OVEP1"``
* u32 length + UTF-8 JSON ``{"id", "intent", "scene"}``
* u32 n_views, u32 height, u32 width, then ``n_views*height*width*3`` RGB bytes
* an OCCGRID v1 dump
* u32 n_past, u32 n_future, then ``(n_past + n_future) * 5`` float32 values
  ``(t, x, y, heading, speed)``
* u32 length + UTF-8 JSON of the text fields
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from . import occgrid
from .annotate import MetaAction
from .errors import ChecksumError, FormatError, VersionError
from .scene import NUM_CLASSES, Episode, GenConfig, SceneGraph, generate_episode

MAGIC = b"OVEP1"
FORMAT_VERSION = 1
MANIFEST = "manifest.json"


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _pack_block(payload: bytes) -> bytes:
    return struct.pack("<I", len(payload)) + payload


def encode_episode(ep: Episode) -> bytes:
    header = _dumps({"id": int(ep.id), "intent": ep.intent, "scene": ep.scene.to_dict()})
    views = np.ascontiguousarray(ep.views, dtype=np.uint8)
    if views.ndim != 4 or views.shape[-1] != 3:
        raise FormatError(f"episode {ep.id}: views must be [n, H, W, 3], got {views.shape}")
    traj = np.concatenate([np.asarray(ep.past_traj, np.float32), np.asarray(ep.future_traj, np.float32)])
    texts = dict(ep.texts)
    texts["meta"] = None if ep.meta is None else list(ep.meta)
    parts = [
        MAGIC,
        _pack_block(header),
        struct.pack("<III", *views.shape[:3]),
        views.tobytes(),
        occgrid.dump_bytes(ep.grid, NUM_CLASSES),
        struct.pack("<II", len(ep.past_traj), len(ep.future_traj)),
        traj.astype("<f4").tobytes(),
        _pack_block(_dumps(texts)),
    ]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, name: str):
        self.buf, self.pos, self.name = buf, 0, name

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.name}: truncated record (need {n} bytes at offset {self.pos})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals

    def json_block(self):
        raw = self.take(self.u32())
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{self.name}: malformed JSON block") from exc


def decode_episode(buf: bytes, name: str = "episode") -> Episode:
    r = _Reader(buf, name)
    magic = r.take(len(MAGIC))
    if magic != MAGIC:
        if magic[:4] == MAGIC[:4]:
            raise VersionError(f"{name}: unsupported record version {magic!r}")
        raise FormatError(f"{name}: bad magic {magic!r}")
    header = r.json_block()
    n, h, w = r.u32(3)
    views = np.frombuffer(r.take(n * h * w * 3), dtype=np.uint8).reshape(n, h, w, 3).copy()
    try:
        grid, _, end = occgrid.parse_bytes(buf, r.pos)
    except FormatError as exc:
        raise type(exc)(f"{name}: {exc}") from exc
    r.pos = end
    n_past, n_future = r.u32(2)
    traj = np.frombuffer(r.take(4 * 5 * (n_past + n_future)), dtype="<f4").reshape(-1, 5).astype(np.float32)
    texts = r.json_block()
    if r.pos != len(buf):
        raise FormatError(f"{name}: {len(buf) - r.pos} trailing bytes")
    meta = texts.pop("meta", None)
    return Episode(
        id=int(header["id"]),
        scene=SceneGraph.from_dict(header["scene"]),
        views=views,
        grid=grid,
        past_traj=traj[:n_past].copy(),
        future_traj=traj[n_past:].copy(),
        intent=header["intent"],
        meta=None if meta is None else MetaAction(*meta),
        texts=texts,
    )


def episode_filename(ep_id: int) -> str:
    return f"ep_{int(ep_id):06d}.bin"


def write_dataset(episodes, directory, config: dict | None = None) -> dict:
    """Write episodes then the manifest (last, so a partial write has none)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for ep in episodes:
        blob = encode_episode(ep)
        fname = episode_filename(ep.id)
        with open(directory / fname, "wb") as f:
            f.write(blob)
        entries.append({"id": int(ep.id), "file": fname, "sha256": hashlib.sha256(blob).hexdigest()})
    ids = [e["id"] for e in entries]
    if len(set(ids)) != len(ids):
        raise FormatError("duplicate episode ids in dataset")
    manifest = {
        "format": MAGIC.decode("ascii"),
        "version": FORMAT_VERSION,
        "count": len(entries),
        "config": config or {},
        "episodes": entries,
    }
    tmp = directory / (MANIFEST + ".tmp")
    tmp.write_bytes(_dumps(manifest))
    os.replace(tmp, directory / MANIFEST)
    return manifest


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise FormatError(f"no {MANIFEST} in {directory}")
    try:
        manifest = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed {MANIFEST}") from exc
    if manifest.get("version") != FORMAT_VERSION or manifest.get("format") != MAGIC.decode("ascii"):
        raise VersionError(f"unsupported dataset version {manifest.get('format')!r} v{manifest.get('version')!r}")
    if manifest.get("count") != len(manifest.get("episodes", [])):
        raise FormatError(
            f"manifest count {manifest.get('count')} does not match {len(manifest.get('episodes', []))} entries"
        )
    return manifest


def read_episode(directory, entry: dict, verify: bool = True) -> Episode:
    name = f"episode {entry['id']}"
    path = Path(directory) / entry["file"]
    if not path.exists():
        raise FormatError(f"{name}: missing file {entry['file']}")
    blob = path.read_bytes()
    if verify and hashlib.sha256(blob).hexdigest() != entry["sha256"]:
        raise ChecksumError(f"{name}: checksum mismatch in {entry['file']}")
    ep = decode_episode(blob, name)
    if ep.id != entry["id"]:
        raise FormatError(f"{name}: record holds id {ep.id}")
    return ep


def read_dataset(directory, limit: int | None = None, verify: bool = True) -> list[Episode]:
    manifest = read_manifest(directory)
    entries = manifest["episodes"] if limit is None else manifest["episodes"][:limit]
    return [read_episode(directory, e, verify) for e in entries]


def generate_dataset(seed: int, count: int, cfg: GenConfig | None = None, annotate: bool = True) -> list[Episode]:
    """Episodes ``seed*1_000_003 + i``-seeded, ids ``0..count-1``."""
    from .annotate import annotate_episode

    cfg = cfg or GenConfig()
    out = []
    for i in range(count):
        ep = generate_episode(episode_seed(seed, i), cfg, episode_id=i)
        out.append(annotate_episode(ep) if annotate else ep)
    return out


def episode_seed(seed: int, index: int) -> int:
    return int(seed) * 1_000_003 + int(index)
