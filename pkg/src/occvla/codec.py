"""Vector-quantised occupancy codec, latent projector and mIoU scoring.

Grids are ``[B, 32, 32, 8]`` class indices.  The encoder one-hot embeds each
BEV column (``D*K = 64`` channels), downsamples twice by 2 with
space-to-depth and emits an ``8 x 8 x F`` latent.  The decoder mirrors it and
a per-cell classification head produces ``[B, 32, 32, 8, K]`` logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .nn import Module, conv3x3, depth_to_space, init_conv3x3, init_linear, linear, space_to_depth
from .rng import Rng
from .tensor import Tensor


@dataclass(frozen=True)
class CodecConfig:
    height: int = 32
    width: int = 32
    depth: int = 8
    num_classes: int = 8
    downsample: int = 4
    latent_dim: int = 16
    codebook_size: int = 128
    hidden: int = 64
    beta: float = 0.25

    @property
    def latent_hw(self) -> tuple[int, int]:
        return self.height // self.downsample, self.width // self.downsample


@dataclass
class Quantized:
    codes: np.ndarray
    quantized: Tensor
    codebook_loss: Tensor
    commitment_loss: Tensor
    cell_codebook_loss: np.ndarray
    cell_commitment_loss: np.ndarray


def quantize(z: Tensor, codebook: Tensor, beta: float = 0.25) -> Quantized:
    """Nearest-code lookup with a straight-through gradient.

    ``z`` is ``[..., F]`` and ``codebook`` is ``[M, F]``.  Ties go to the lowest
    code index.  ``codebook_loss`` moves codes toward the (stopped) latents,
    ``commitment_loss`` (scaled by ``beta``) pulls latents toward their codes.
    Both are means of per-cell squared distances.
    """
    if codebook.ndim != 2 or codebook.shape[0] == 0:
        raise ShapeError(f"codebook must be a non-empty [M, F] array, got {codebook.shape}")
    if z.shape[-1] != codebook.shape[1]:
        raise ShapeError(f"latent dim {z.shape[-1]} does not match codebook dim {codebook.shape[1]}")
    zd = z.data.reshape(-1, z.shape[-1]).astype(np.float64)
    cb = codebook.data.astype(np.float64)
    codes = np.empty(zd.shape[0], dtype=np.int64)
    for start in range(0, zd.shape[0], 2048):
        chunk = zd[start : start + 2048]
        dist = ((chunk[:, None, :] - cb[None, :, :]) ** 2).sum(-1)
        codes[start : start + 2048] = np.argmin(dist, axis=1)
    codes_shaped = codes.reshape(z.shape[:-1])
    e = T.take(codebook, codes_shaped, axis=0)
    diff = z.data - e.data
    # straight-through: forward value is the code, backward is identity to z
    q = z + Tensor(-diff)
    n_cells = max(codes.size, 1)
    codebook_loss = T.scale(T.tsum((Tensor(z.data) - e) * (Tensor(z.data) - e)), 1.0 / n_cells)
    commitment_loss = T.scale(T.tsum((z - Tensor(e.data)) * (z - Tensor(e.data))), beta / n_cells)
    cell = (diff.astype(np.float64) ** 2).sum(-1)
    return Quantized(codes_shaped, q, codebook_loss, commitment_loss, cell, beta * cell)


def one_hot_columns(grid: np.ndarray, num_classes: int) -> np.ndarray:
    """``[B, H, W, D]`` classes -> ``[B, H, W, D*K]`` float32 one-hot columns."""
    grid = np.asarray(grid)
    eye = np.eye(num_classes, dtype=np.float32)
    b, h, w, d = grid.shape
    return eye[grid].reshape(b, h, w, d * num_classes)


class Codec(Module):
    """Parameters live under ``codec.encoder.``, ``codec.codebook``,
    ``codec.decoder.`` and ``codec.head.``."""

    def __init__(self, cfg: CodecConfig = CodecConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = Rng(seed).child("codec")
        c, k, hd, f = cfg.depth * cfg.num_classes, cfg.num_classes, cfg.hidden, cfg.latent_dim
        init_linear(self, rng, "codec.encoder.in", c, hd // 2)
        init_linear(self, rng, "codec.encoder.down1", 4 * (hd // 2), hd)
        init_linear(self, rng, "codec.encoder.down2", 4 * hd, hd)
        init_conv3x3(self, rng, "codec.encoder.conv", hd, hd)
        init_linear(self, rng, "codec.encoder.out", hd, f)
        self.add("codec.codebook", rng.child("codebook").normal((cfg.codebook_size, f), 0.5))
        init_linear(self, rng, "codec.decoder.in", f, hd)
        init_conv3x3(self, rng, "codec.decoder.conv", hd, hd)
        init_linear(self, rng, "codec.decoder.up1", hd, 4 * hd)
        init_linear(self, rng, "codec.decoder.up2", hd, 4 * (hd // 2))
        init_linear(self, rng, "codec.head.out", hd // 2, cfg.depth * k)
        self.usage = np.zeros(cfg.codebook_size, dtype=np.int64)

    @property
    def codebook(self) -> Tensor:
        return self.params["codec.codebook"]

    def _check_grid(self, grid: np.ndarray) -> np.ndarray:
        grid = np.asarray(grid)
        if grid.ndim == 3:
            grid = grid[None]
        cfg = self.cfg
        if grid.shape[1:] != (cfg.height, cfg.width, cfg.depth):
            raise ShapeError(f"grid shape {grid.shape[1:]} != {(cfg.height, cfg.width, cfg.depth)}")
        if grid.size and (grid.min() < 0 or grid.max() >= cfg.num_classes):
            raise ShapeError(f"voxel classes must lie in [0, {cfg.num_classes})")
        return grid

    def encode(self, grid: np.ndarray) -> Tensor:
        """``[B, 32, 32, 8]`` -> continuous latent ``[B, 8, 8, F]``."""
        grid = self._check_grid(grid)
        p = self.params
        x = Tensor(one_hot_columns(grid, self.cfg.num_classes))
        x = T.gelu(linear(p, "codec.encoder.in", x))
        x = T.gelu(linear(p, "codec.encoder.down1", space_to_depth(x, 2)))
        x = T.gelu(linear(p, "codec.encoder.down2", space_to_depth(x, 2)))
        x = T.gelu(conv3x3(p, "codec.encoder.conv", x))
        return linear(p, "codec.encoder.out", x)

    def quantize(self, z: Tensor) -> Quantized:
        return quantize(z, self.codebook, self.cfg.beta)

    def decode(self, latent: Tensor) -> Tensor:
        """``[B, 8, 8, F]`` -> voxel logits ``[B, 32, 32, 8, K]``."""
        h8, w8 = self.cfg.latent_hw
        if latent.ndim != 4 or latent.shape[1:] != (h8, w8, self.cfg.latent_dim):
            raise ShapeError(f"latent shape {latent.shape} != [B, {h8}, {w8}, {self.cfg.latent_dim}]")
        p = self.params
        x = T.gelu(linear(p, "codec.decoder.in", latent))
        x = T.gelu(conv3x3(p, "codec.decoder.conv", x))
        x = T.gelu(depth_to_space(linear(p, "codec.decoder.up1", x), 2))
        x = T.gelu(depth_to_space(linear(p, "codec.decoder.up2", x), 2))
        logits = linear(p, "codec.head.out", x)
        b = latent.shape[0]
        cfg = self.cfg
        return T.reshape(logits, (b, cfg.height, cfg.width, cfg.depth, cfg.num_classes))

    def reconstruct(self, grid: np.ndarray, quantized: bool = True) -> np.ndarray:
        with T.no_grad():
            z = self.encode(grid)
            lat = self.quantize(z).quantized if quantized else z
            return np.argmax(self.decode(lat).data, axis=-1).astype(np.uint8)

    def init_codebook_from(self, z: np.ndarray, rng: Rng) -> None:
        flat = z.reshape(-1, z.shape[-1])
        idx = rng.choice(flat.shape[0], size=self.cfg.codebook_size, replace=flat.shape[0] < self.cfg.codebook_size)
        self.codebook.data[...] = flat[idx].astype(self.codebook.dtype)

    def restart_dead_codes(self, z: np.ndarray, window_usage: np.ndarray, rng: Rng) -> int:
        """Re-seed codes unused in the last window from random current latents."""
        dead = np.nonzero(window_usage == 0)[0]
        if dead.size == 0:
            return 0
        flat = z.reshape(-1, z.shape[-1])
        pick = rng.choice(flat.shape[0], size=dead.size, replace=flat.shape[0] < dead.size)
        noise = rng.normal((dead.size, flat.shape[1]), 0.01, np.float64)
        self.codebook.data[dead] = (flat[pick] + noise).astype(self.codebook.dtype)
        return int(dead.size)


def codec_loss(codec: Codec, grid: np.ndarray, class_weight=None):
    """Stage-0 objective: reconstruction cross-entropy + codebook + commitment terms."""
    z = codec.encode(grid)
    q = codec.quantize(z)
    logits = codec.decode(q.quantized)
    recon = T.cross_entropy(logits, np.asarray(grid).astype(np.int64), weight=class_weight)
    total = recon + q.codebook_loss + q.commitment_loss
    return total, recon, q, logits


class Projector(Module):
    """Positionwise linear map from occupancy-query states to latent cells."""

    def __init__(self, d_model: int, cfg: CodecConfig = CodecConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        init_linear(self, Rng(seed).child("projector"), "proj", d_model, cfg.latent_dim)

    def __call__(self, occ_hidden: Tensor) -> Tensor:
        h8, w8 = self.cfg.latent_hw
        if occ_hidden.ndim != 3 or occ_hidden.shape[1] != h8 * w8:
            raise ContractError(f"expected [B, {h8 * w8}, d_model] occupancy states, got {occ_hidden.shape}")
        z = linear(self.params, "proj", occ_hidden)
        return T.reshape(z, (occ_hidden.shape[0], h8, w8, self.cfg.latent_dim))


def class_weights(grids, num_classes: int = 8) -> np.ndarray:
    """Per-class weights proportional to ``1/sqrt(freq)``, normalised so the
    frequency-weighted mean weight is 1.  Absent classes get the largest weight."""
    counts = np.zeros(num_classes, dtype=np.float64)
    for g in grids:
        counts += np.bincount(np.asarray(g).reshape(-1), minlength=num_classes)[:num_classes]
    freq = counts / max(counts.sum(), 1.0)
    w = np.zeros(num_classes)
    present = freq > 0
    w[present] = 1.0 / np.sqrt(freq[present])
    if not present.all():
        w[~present] = w[present].max() if present.any() else 1.0
    return w / float((freq * w).sum() or 1.0)


# -- metrics ----------------------------------------------------------------

class ConfusionMatrix:
    """Count matrix ``[gt, pred]``; merging is addition, so shards combine freely."""

    def __init__(self, num_classes: int = 8):
        self.k = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred, gt) -> "ConfusionMatrix":
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
        idx = gt.reshape(-1).astype(np.int64) * self.k + pred.reshape(-1).astype(np.int64)
        self.counts += np.bincount(idx, minlength=self.k * self.k).reshape(self.k, self.k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.k)
        out.counts = self.counts + other.counts
        return out

    def iou_table(self) -> dict[int, float | None]:
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(0) + self.counts.sum(1) - np.diag(self.counts)
        return {c: (float(tp[c] / union[c]) if union[c] > 0 else None) for c in range(self.k)}

    def miou(self, ignore_empty: bool = False) -> float:
        """Mean IoU over classes that occur in the ground truth."""
        table = self.iou_table()
        in_gt = self.counts.sum(1) > 0
        vals = [v for c, v in table.items() if in_gt[c] and not (ignore_empty and c == 0)]
        return float(np.mean(vals)) if vals else float("nan")

    def accuracy(self) -> float:
        total = self.counts.sum()
        return float(np.trace(self.counts) / total) if total else float("nan")


def miou(pred, gt, ignore_empty: bool = False, num_classes: int = 8) -> tuple[float, dict[int, float | None]]:
    """Mean IoU over classes occurring in ``gt`` (class 0 dropped when
    ``ignore_empty``); the table maps class -> IoU, or None when the class is
    absent from both grids."""
    cm = ConfusionMatrix(num_classes).update(pred, gt)
    return cm.miou(ignore_empty), cm.iou_table()
