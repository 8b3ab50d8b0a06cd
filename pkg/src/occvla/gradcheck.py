"""Central finite-difference gradient checks (float64)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .rng import Rng
from .tensor import Tensor, backward


@dataclass
class GradCheckResult:
    name: str
    rel_error: float
    checked: int

    def ok(self, tol: float) -> bool:
        return self.rel_error < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(num / den)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: Rng | None = None,
) -> list[GradCheckResult]:
    """Compare analytic gradients of ``loss_fn()`` against central differences.

    ``max_entries`` caps how many coordinates of each tensor are perturbed
    (chosen with ``rng``); the analytic gradient is restricted to the same
    coordinates before comparison.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    backward(loss)
    rng = rng or Rng(0)
    results = []
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            idx = np.sort(rng.child(name).choice(n, max_entries, replace=False))
        else:
            idx = np.arange(n)
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            numeric[j] = (up - down) / (2 * h)
        results.append(GradCheckResult(name, relative_error(analytic.reshape(-1)[idx], numeric), idx.size))
    return results


# -- per-operation suite ----------------------------------------------------

def _rand_shape(rng: Rng, ndim: int, lo: int = 1, hi: int = 5) -> tuple[int, ...]:
    return tuple(int(s) for s in rng.integers(lo, hi + 1, ndim))


def _param(rng: Rng, shape, low=None) -> Tensor:
    if low is None:
        return Tensor(rng.normal(shape, 1.0, np.float64), requires_grad=True)
    return Tensor(rng.uniform(shape, low, low + 2.0, np.float64), requires_grad=True)


def _op_cases(rng: Rng):
    """Yield ``(op_name, params, forward)`` for one random shape of every op."""
    from . import tensor as T

    nd = int(rng.integers(1, 4))
    shape = _rand_shape(rng, nd)
    a, b = _param(rng, shape), _param(rng, shape)
    yield "add", {"a": a, "b": b}, lambda: T.add(a, b)
    bt = _param(rng, shape[-1:])
    yield "add_broadcast", {"a": a, "b": bt}, lambda: T.add(a, bt)
    yield "sub", {"a": a, "b": b}, lambda: T.sub(a, b)
    yield "mul", {"a": a, "b": b}, lambda: T.mul(a, b)
    c = float(rng.normal(()))
    yield "scale", {"a": a}, lambda: T.scale(a, c)
    yield "exp", {"a": a}, lambda: T.exp(a)
    pos = _param(rng, shape, low=0.5)
    yield "log", {"a": pos}, lambda: T.log(pos)
    yield "gelu", {"a": a}, lambda: T.gelu(a)
    yield "sum", {"a": a}, lambda: T.tsum(a, axis=-1)
    yield "mean", {"a": a}, lambda: T.mean(a, axis=0, keepdims=True)
    yield "reshape", {"a": a}, lambda: T.reshape(a, (-1,))

    batch = _rand_shape(rng, int(rng.integers(0, 2)))
    m, k, n = (int(s) for s in rng.integers(1, 6, 3))
    x, y = _param(rng, batch + (m, k)), _param(rng, batch + (k, n))
    yield "matmul", {"a": x, "b": y}, lambda: T.matmul(x, y)
    w2 = _param(rng, (k, n))
    yield "matmul_shared_weight", {"a": x, "b": w2}, lambda: T.matmul(x, w2)

    s3 = _rand_shape(rng, 3)
    t3 = _param(rng, s3)
    perm = tuple(int(i) for i in rng.permutation(3))
    yield "transpose", {"a": t3}, lambda: T.transpose(t3, perm)
    other = _param(rng, s3[:1] + (int(rng.integers(1, 4)),) + s3[2:])
    yield "concat", {"a": t3, "b": other}, lambda: T.concat([t3, other], axis=1)
    yield "getitem", {"a": t3}, lambda: t3[:, 1:, ::2] if s3[1] > 1 else t3[:, :, ::2]
    idx = rng.integers(0, s3[1], 4)
    yield "take", {"a": t3}, lambda: T.take(t3, idx, axis=1)
    yield "pad", {"a": t3}, lambda: T.pad(t3, [(0, 0), (1, 2), (0, 1)])
    table = _param(rng, (int(rng.integers(2, 7)), int(rng.integers(1, 5))))
    ids = rng.integers(0, table.shape[0], (3, 2))
    yield "embedding", {"table": table}, lambda: T.embedding(table, ids)

    logits = _param(rng, s3)
    yield "softmax", {"x": logits}, lambda: T.softmax(logits, axis=-1)
    mask = rng.uniform(s3) > 0.3
    mask[..., 0] = True
    yield "softmax_masked", {"x": logits}, lambda: T.softmax(logits, axis=-1, mask=mask)
    yield "log_softmax", {"x": logits}, lambda: T.log_softmax(logits, axis=-1)
    g = _param(rng, s3[-1:])
    yield "rms_norm", {"x": logits, "g": g}, lambda: T.rms_norm(logits, g)

    nrow, ncls = int(rng.integers(1, 7)), int(rng.integers(2, 6))
    cl = _param(rng, (nrow, ncls))
    tg = rng.integers(0, ncls, nrow)
    tg[0] = -100
    yield "cross_entropy", {"logits": cl}, lambda: T.cross_entropy(cl, tg)
    cw = rng.uniform((ncls,), 0.2, 2.0)
    yield "cross_entropy_weighted", {"logits": cl}, lambda: T.cross_entropy(cl, tg, weight=cw)
    yield "mse", {"a": a, "b": b}, lambda: T.mse(a, b)


_SCALAR_OPS = {"cross_entropy", "cross_entropy_weighted", "mse"}


def run_op_suite(n_shapes: int = 20, seed: int = 0, h: float = 1e-5) -> dict[str, list[float]]:
    """Gradient-check every differentiable primitive on ``n_shapes`` random shapes.

    Non-scalar outputs are reduced with a fixed random linear functional so
    every output coordinate contributes.  Returns the relative errors per
    operation, one entry per shape and input tensor.
    """
    errors: dict[str, list[float]] = {}
    root = Rng(seed)
    for trial in range(n_shapes):
        rng = root.child(trial)
        for name, params, fwd in _op_cases(rng):
            proj_rng = rng.child(name)
            if name in _SCALAR_OPS:
                fn = fwd
            else:
                w = Tensor(proj_rng.normal(fwd().shape, 1.0, np.float64))

                def fn(fwd=fwd, w=w):
                    from .tensor import mul, tsum

                    return tsum(mul(fwd(), w))

            for res in check_gradients(fn, params, h=h):
                errors.setdefault(name, []).append(res.rel_error)
    return errors


# -- whole model ----------------------------------------------------------------

def end_to_end_check(seed: int = 0, lam: float = 1.0, h: float = 1e-5, max_entries: int = 6):
    """Gradient check of ``L_text + lam * L_occ`` through a 2-layer, width-8
    model, the projector and the codec decoder, all in float64.

    Adapter up-projections are randomised so their gradients are non-trivial.
    Returns one :class:`GradCheckResult` per parameter tensor.
    """
    from . import tensor as T
    from .backbone import ModelConfig, TokenBatch, VLOModel
    from .codec import Codec, Projector

    rng = Rng(seed).child("e2e")
    cfg = ModelConfig(d_model=8, n_layers=2, n_heads=2, ffn_width=16, vocab_size=20, adapter_bottleneck=4,
                      max_text_len=8)
    vlm = VLOModel(cfg, seed=seed).astype(np.float64)
    proj = Projector(cfg.d_model, seed=seed)
    codec = Codec(seed=seed)
    for mod in (proj, codec):
        for p in mod.params.values():
            p.data = p.data.astype(np.float64)
    for name, p in vlm.params.items():
        if ".up." in name:
            p.data = rng.child(name).normal(p.shape, 0.3, np.float64)
    views = rng.uniform((1, cfg.n_views, 3, cfg.image_size, cfg.image_size), 0.0, 1.0)
    ids = rng.integers(1, cfg.vocab_size, (1, 7))
    batch = TokenBatch(views, ids, [7], [3])
    targets = batch.targets()
    grid = rng.integers(0, codec.cfg.num_classes, (1, 32, 32, 8))

    def loss_fn():
        out = vlm.forward(batch)
        l_text = T.cross_entropy(out["text_logits"], targets)
        l_occ = T.cross_entropy(codec.decode(proj(out["occ_hidden"])), grid)
        return l_text + T.scale(l_occ, lam)

    params = {}
    for mod in (vlm, proj, codec):
        params.update(mod.params)
    # the encoder and codebook are not on this path; check the rest
    params = {k: v for k, v in params.items() if not k.startswith(("codec.encoder", "codec.codebook"))}
    return check_gradients(loss_fn, params, h=h, max_entries=max_entries, rng=rng)
