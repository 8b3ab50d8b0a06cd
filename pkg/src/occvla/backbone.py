"""Vision-language-occupancy transformer with shared-weight streams.

Three token streams run through the same blocks (one QKV projection, one
output projection, one FFN and two norms per layer):

* visual tokens attend to visual tokens only;
* text tokens attend to all visual tokens, to the whole prompt prefix, and
  causally within the suffix;
* occupancy queries attend to the visual keys/values (computed once per layer
  and reused) and to each other.

Nothing attends to occupancy tokens, so the text path is bit-for-bit the same
whether or not the occupancy stream runs.  Each layer carries two bottleneck
adapters (after attention and after the FFN) whose up-projection starts at
zero.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import CapacityError, ContractError, ShapeError
from .nn import Module, linear
from .rng import Rng
from .tensor import Tensor

VISUAL, TEXT, OCC = "visual", "text", "occ"


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    ffn_width: int = 256
    vocab_size: int = 512
    n_views: int = 4
    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    n_occ_queries: int = 64
    adapter_bottleneck: int = 16
    max_text_len: int = 96

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be a multiple of patch_size")

    @property
    def patches_per_view(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def n_visual_tokens(self) -> int:
        return self.n_views * self.patches_per_view

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenBatch:
    """Padded text plus the views it is conditioned on.

    ``views`` is ``[B, n_views, 3, H, W]`` in ``[0, 1]``; ``text_ids`` is
    ``[B, T]`` padded; ``lengths`` and ``prefix_len`` are per sample.
    With ``view_index`` several text rows share one set of views: row ``i``
    is conditioned on ``views[view_index[i]]``.
    """

    views: np.ndarray
    text_ids: np.ndarray
    lengths: np.ndarray
    prefix_len: np.ndarray
    view_index: np.ndarray | None = None

    def __post_init__(self):
        self.text_ids = np.asarray(self.text_ids, dtype=np.int64)
        if self.view_index is not None:
            self.view_index = np.asarray(self.view_index, dtype=np.int64)
            if self.view_index.shape != (self.text_ids.shape[0],):
                raise ShapeError("view_index needs one entry per text row")
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        self.prefix_len = np.asarray(self.prefix_len, dtype=np.int64)
        b, t = self.text_ids.shape
        if self.lengths.shape != (b,) or self.prefix_len.shape != (b,):
            raise ShapeError("lengths and prefix_len need one entry per sample")
        if np.any(self.lengths > t) or np.any(self.lengths < 1):
            raise ShapeError("lengths must lie in [1, T]")
        if np.any(self.prefix_len > self.lengths) or np.any(self.prefix_len < 1):
            raise ContractError("prefix_len must lie in [1, length]")

    def targets(self, ignore_index: int = -100) -> np.ndarray:
        """Next-token targets restricted to the suffix (the supervised region)."""
        b, t = self.text_ids.shape
        tgt = np.full((b, t), ignore_index, dtype=np.int64)
        pos = np.arange(t)[None, :]
        nxt = pos + 1
        keep = (nxt >= self.prefix_len[:, None]) & (nxt < self.lengths[:, None])
        shifted = np.concatenate([self.text_ids[:, 1:], np.zeros((b, 1), np.int64)], axis=1)
        tgt[keep] = shifted[keep]
        return tgt


def views_to_input(views_u8: np.ndarray) -> np.ndarray:
    """``[..., n_views, H, W, 3]`` uint8 -> ``[..., n_views, 3, H, W]`` float32 in [0, 1]."""
    v = np.asarray(views_u8)
    return (np.moveaxis(v, -1, -3).astype(np.float32) / np.float32(255.0))


class AttentionMask:
    """Role-level attention permissions plus the per-sample text mask.

    ``allowed(q_role, k_role)`` answers at role granularity; :meth:`matrix`
    expands one sample into the full token-level boolean matrix ordered
    visual, text, occ.
    """

    ROLE_RULES = {
        (VISUAL, VISUAL): True,
        (VISUAL, TEXT): False,
        (VISUAL, OCC): False,
        (TEXT, VISUAL): True,
        (TEXT, TEXT): True,
        (TEXT, OCC): False,
        (OCC, VISUAL): True,
        (OCC, TEXT): False,
        (OCC, OCC): True,
    }

    def __init__(self, n_visual: int, text_len: int, lengths, prefix_len, n_occ: int, view_index=None):
        self.view_index = view_index
        self.n_visual = n_visual
        self.text_len = text_len
        self.lengths = np.asarray(lengths, dtype=np.int64)
        self.prefix_len = np.asarray(prefix_len, dtype=np.int64)
        self.n_occ = n_occ

    @classmethod
    def for_batch(cls, cfg: ModelConfig, batch: TokenBatch) -> "AttentionMask":
        return cls(
            cfg.n_visual_tokens,
            batch.text_ids.shape[1],
            batch.lengths,
            batch.prefix_len,
            cfg.n_occ_queries,
            batch.view_index,
        )

    def allowed(self, q_role: str, k_role: str) -> bool:
        return self.ROLE_RULES[(q_role, k_role)]

    def text_self(self) -> np.ndarray:
        """``[B, T, T]``: key j visible to query i if j is a real token and
        either inside the prefix or not after i."""
        t = self.text_len
        i = np.arange(t)[:, None]
        j = np.arange(t)[None, :]
        in_prefix = j[None] < self.prefix_len[:, None, None]
        causal = (j <= i)[None]
        real = j[None] < self.lengths[:, None, None]
        return real & (in_prefix | causal)

    def matrix(self, sample: int = 0) -> np.ndarray:
        nv, t, no = self.n_visual, self.text_len, self.n_occ
        n = nv + t + no
        m = np.zeros((n, n), dtype=bool)
        sl = {VISUAL: slice(0, nv), TEXT: slice(nv, nv + t), OCC: slice(nv + t, n)}
        for (qr, kr), ok in self.ROLE_RULES.items():
            if ok:
                m[sl[qr], sl[kr]] = True
        m[sl[TEXT], sl[TEXT]] = self.text_self()[sample]
        return m

    def check_layout(self, n_visual: int, text_len: int, n_occ: int | None) -> None:
        if n_visual != self.n_visual or text_len != self.text_len or (n_occ is not None and n_occ != self.n_occ):
            raise ContractError(
                f"mask layout (visual={self.n_visual}, text={self.text_len}, occ={self.n_occ}) does not match "
                f"states (visual={n_visual}, text={text_len}, occ={n_occ})"
            )


@dataclass
class VisualCache:
    """Per-layer visual keys/values and the final visual states for one batch."""

    keys: list
    values: list
    final: Tensor


def _heads(x: Tensor, n_heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over ``[B, H, N, dh]`` heads."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = T.scale(q @ T.swapaxes(k, -1, -2), scale)
    return T.softmax(scores, axis=-1, mask=mask) @ v


class VLOModel(Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = Rng(seed).child("vlm")
        d, std = cfg.d_model, 0.02
        resid_std = std / math.sqrt(2 * cfg.n_layers)
        self.add("vlm.patch.w", rng.child("patch").normal((cfg.patch_dim, d), 1.0 / math.sqrt(cfg.patch_dim)))
        self.add("vlm.view_emb", rng.child("view").normal((cfg.n_views, d), std))
        self.add("vlm.pos_emb", rng.child("pos").normal((cfg.patches_per_view, d), std))
        self.add("vlm.tok_emb", rng.child("tok").normal((cfg.vocab_size, d), std))
        self.add("vlm.text_pos", rng.child("tpos").normal((cfg.max_text_len, d), std))
        self.add("vlm.occ_queries", rng.child("occq").normal((cfg.n_occ_queries, d), std))
        for l in range(cfg.n_layers):
            r = rng.child(f"layer{l}")
            pre = f"vlm.layers.{l}"
            self.add(f"{pre}.norm1", np.ones(d, np.float32))
            self.add(f"{pre}.qkv.w", r.child("qkv").normal((d, 3 * d), std))
            self.add(f"{pre}.o.w", r.child("o").normal((d, d), resid_std))
            self.add(f"{pre}.norm2", np.ones(d, np.float32))
            self.add(f"{pre}.ffn1.w", r.child("ffn1").normal((d, cfg.ffn_width), std))
            self.add(f"{pre}.ffn1.b", np.zeros(cfg.ffn_width, np.float32))
            self.add(f"{pre}.ffn2.w", r.child("ffn2").normal((cfg.ffn_width, d), resid_std))
            self.add(f"{pre}.ffn2.b", np.zeros(d, np.float32))
            for a in ("adapter_attn", "adapter_ffn"):
                self.add(f"{pre}.{a}.down.w", r.child(a).normal((d, cfg.adapter_bottleneck), std))
                self.add(f"{pre}.{a}.down.b", np.zeros(cfg.adapter_bottleneck, np.float32))
                self.add(f"{pre}.{a}.up.w", np.zeros((cfg.adapter_bottleneck, d), np.float32))
                self.add(f"{pre}.{a}.up.b", np.zeros(d, np.float32))
        self.add("vlm.norm_f", np.ones(d, np.float32))
        self.add("vlm.lm_head.w", rng.child("head").normal((d, cfg.vocab_size), std))
        self.use_adapters = True

    @property
    def dtype(self):
        return self.params["vlm.patch.w"].dtype

    def astype(self, dtype) -> "VLOModel":
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        return self

    # -- embeddings ---------------------------------------------------------

    def patchify(self, views) -> Tensor:
        """``[B, n_views, C, H, W]`` -> visual token embeddings ``[B, n_visual, d]``."""
        cfg = self.cfg
        v = np.asarray(views)
        expect = (cfg.n_views, cfg.channels, cfg.image_size, cfg.image_size)
        if v.ndim != 5 or v.shape[1:] != expect:
            raise ShapeError(f"views must be [B, {', '.join(map(str, expect))}], got {v.shape}")
        b, nv, c, h, w = v.shape
        p = cfg.patch_size
        patches = v.reshape(b, nv, c, h // p, p, w // p, p).transpose(0, 1, 3, 5, 4, 6, 2)
        patches = patches.reshape(b, nv * cfg.patches_per_view, cfg.patch_dim).astype(self.dtype)
        x = Tensor(patches) @ self.params["vlm.patch.w"]
        view_ids = np.repeat(np.arange(nv), cfg.patches_per_view)
        pos_ids = np.tile(np.arange(cfg.patches_per_view), nv)
        emb = T.embedding(self.params["vlm.view_emb"], view_ids) + T.embedding(self.params["vlm.pos_emb"], pos_ids)
        return x + emb

    def embed_text(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape[1] > self.cfg.max_text_len:
            raise CapacityError(f"text length {ids.shape[1]} exceeds max_text_len {self.cfg.max_text_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise ShapeError("token id outside the vocabulary")
        tok = T.embedding(self.params["vlm.tok_emb"], ids)
        return tok + T.embedding(self.params["vlm.text_pos"], np.arange(ids.shape[1]))

    def occ_input(self, batch_size: int) -> Tensor:
        q = self.params["vlm.occ_queries"]
        return T.reshape(q, (1,) + q.shape) + T.zeros((batch_size,) + q.shape, dtype=q.dtype)

    # -- blocks -------------------------------------------------------------

    def _adapter(self, pre: str, name: str, x: Tensor) -> Tensor:
        if not self.use_adapters:
            return x
        p = self.params
        h = T.gelu(linear(p, f"{pre}.{name}.down", x))
        return x + linear(p, f"{pre}.{name}.up", h)

    def _qkv(self, l: int, x: Tensor):
        p = self.params
        pre = f"vlm.layers.{l}"
        h = T.rms_norm(x, p[f"{pre}.norm1"])
        qkv = h @ p[f"{pre}.qkv.w"]
        d = self.cfg.d_model
        nh = self.cfg.n_heads
        return (_heads(qkv[:, :, :d], nh), _heads(qkv[:, :, d : 2 * d], nh), _heads(qkv[:, :, 2 * d :], nh))

    def _finish(self, l: int, x: Tensor, attn_heads: Tensor) -> Tensor:
        p = self.params
        pre = f"vlm.layers.{l}"
        a = _merge(attn_heads) @ p[f"{pre}.o.w"]
        x = x + self._adapter(pre, "adapter_attn", a)
        h = T.rms_norm(x, p[f"{pre}.norm2"])
        f = linear(p, f"{pre}.ffn2", T.gelu(linear(p, f"{pre}.ffn1", h)))
        return x + self._adapter(pre, "adapter_ffn", f)

    def block_forward(self, l: int, states: dict, mask: AttentionMask) -> dict:
        """One layer over whichever streams are present in ``states``.

        ``states`` maps role -> ``[B, n, d]``; the visual stream is required
        because both other streams read its keys and values.
        """
        if VISUAL not in states:
            raise ContractError("block_forward needs the visual stream")
        xv = states[VISUAL]
        xt = states.get(TEXT)
        xo = states.get(OCC)
        mask.check_layout(xv.shape[1], 0 if xt is None else xt.shape[1], None if xo is None else xo.shape[1])
        qv, kv, vv = self._qkv(l, xv)
        out = {VISUAL: self._finish(l, xv, attention(qv, kv, vv))}
        if xt is not None:
            out[TEXT] = self._text_layer(l, xt, kv, vv, mask)
        if xo is not None:
            out[OCC] = self._occ_layer(l, xo, kv, vv)
        return out

    def _text_layer(self, l: int, xt: Tensor, kv: Tensor, vv: Tensor, mask: AttentionMask) -> Tensor:
        qt, kt, vt = self._qkv(l, xt)
        if mask.view_index is not None:
            kv = T.take(kv, mask.view_index, axis=0)
            vv = T.take(vv, mask.view_index, axis=0)
        keys = T.concat([kv, kt], axis=2)
        values = T.concat([vv, vt], axis=2)
        b, t = xt.shape[0], xt.shape[1]
        m = np.concatenate([np.ones((b, t, kv.shape[2]), dtype=bool), mask.text_self()], axis=2)[:, None]
        return self._finish(l, xt, attention(qt, keys, values, m))

    def _occ_layer(self, l: int, xo: Tensor, kv: Tensor, vv: Tensor) -> Tensor:
        qo, ko, vo = self._qkv(l, xo)
        keys = T.concat([kv, ko], axis=2)
        values = T.concat([vv, vo], axis=2)
        return self._finish(l, xo, attention(qo, keys, values))

    # -- full passes --------------------------------------------------------

    def encode_visual(self, views) -> VisualCache:
        """Run the visual stream alone and keep each layer's keys and values."""
        x = self.patchify(views)
        keys, values = [], []
        for l in range(self.cfg.n_layers):
            q, k, v = self._qkv(l, x)
            keys.append(k)
            values.append(v)
            x = self._finish(l, x, attention(q, k, v))
        return VisualCache(keys, values, T.rms_norm(x, self.params["vlm.norm_f"]))

    def text_from_cache(self, cache: VisualCache, batch: TokenBatch) -> Tensor:
        mask = AttentionMask.for_batch(self.cfg, batch)
        xt = self.embed_text(batch.text_ids)
        for l in range(self.cfg.n_layers):
            xt = self._text_layer(l, xt, cache.keys[l], cache.values[l], mask)
        return T.rms_norm(xt, self.params["vlm.norm_f"]) @ self.params["vlm.lm_head.w"]

    def occ_from_cache(self, cache: VisualCache) -> Tensor:
        xo = self.occ_input(cache.final.shape[0])
        for l in range(self.cfg.n_layers):
            xo = self._occ_layer(l, xo, cache.keys[l], cache.values[l])
        return T.rms_norm(xo, self.params["vlm.norm_f"])

    def forward(self, batch: TokenBatch, skip_occ: bool = False) -> dict:
        """All streams layer by layer.

        Returns ``text_logits``, ``visual`` (final normed visual states) and,
        unless ``skip_occ``, ``occ_hidden``.
        """
        mask = AttentionMask.for_batch(self.cfg, batch)
        states = {VISUAL: self.patchify(batch.views), TEXT: self.embed_text(batch.text_ids)}
        if not skip_occ:
            states[OCC] = self.occ_input(states[VISUAL].shape[0])
        for l in range(self.cfg.n_layers):
            states = self.block_forward(l, states, mask)
        nf = self.params["vlm.norm_f"]
        out = {
            "text_logits": T.rms_norm(states[TEXT], nf) @ self.params["vlm.lm_head.w"],
            "visual": T.rms_norm(states[VISUAL], nf),
        }
        if not skip_occ:
            out["occ_hidden"] = T.rms_norm(states[OCC], nf)
        return out

    def forward_text(self, batch: TokenBatch, skip_occ: bool = True) -> Tensor:
        return self.forward(batch, skip_occ)["text_logits"]

    def forward_occ(self, views) -> Tensor:
        return self.occ_from_cache(self.encode_visual(views))

    # -- decoding -----------------------------------------------------------

    def greedy_generate(self, views, prompts, max_new: int, eos_id: int, pad_id: int = 0, cache=None):
        """Greedy continuation of each prompt; the occupancy stream never runs.

        Returns a list of generated id lists (without the end token).
        """
        with T.no_grad():
            state = {"cache": cache}

            def logits_fn(batch: TokenBatch) -> np.ndarray:
                if state["cache"] is None:
                    state["cache"] = self.encode_visual(views)
                return self.text_from_cache(state["cache"], batch).data

            return greedy_loop(logits_fn, prompts, max_new, eos_id, self.cfg.max_text_len, pad_id)


def greedy_loop(logits_fn, prompts, max_new: int, eos_id: int, max_len: int, pad_id: int = 0) -> list[list[int]]:
    """Argmax decoding driver shared by every generation path.

    ``logits_fn`` maps a :class:`TokenBatch` (views left as ``None``) to
    ``[B, T, vocab]`` logits.
    """
    prompts = [list(map(int, p)) for p in prompts]
    b = len(prompts)
    longest = max(len(p) for p in prompts)
    if longest > max_len:
        raise CapacityError(f"prompt of {longest} tokens exceeds max_text_len {max_len}")
    max_new = max(0, min(max_new, max_len - longest))
    out = [[] for _ in range(b)]
    if max_new == 0:
        return out
    ids = np.full((b, longest + max_new), pad_id, dtype=np.int64)
    for i, p in enumerate(prompts):
        ids[i, : len(p)] = p
    lengths = np.array([len(p) for p in prompts])
    prefix = lengths.copy()
    done = np.zeros(b, dtype=bool)
    for _ in range(max_new):
        width = int(lengths.max())
        logits = logits_fn(TokenBatch(None, ids[:, :width], lengths, prefix))
        nxt = np.argmax(logits[np.arange(b), lengths - 1], axis=-1)
        for i in range(b):
            if done[i]:
                continue
            if nxt[i] == eos_id:
                done[i] = True
                continue
            ids[i, lengths[i]] = nxt[i]
            out[i].append(int(nxt[i]))
            lengths[i] += 1
        if done.all():
            break
    return out
