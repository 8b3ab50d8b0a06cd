"""Named-parameter containers and the few layers the models share."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor


class Module:
    """Holds a flat ``name -> Tensor`` dict of parameters.

    Names are dotted paths (``"codec.encoder.in.w"``) so optimizer groups can
    select parameters by prefix.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Tensor(value, requires_grad=True)
        self.params[name] = p
        return p

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        """Copy arrays into matching parameters (in place, dtype-preserving)."""
        from .errors import ContractError

        missing = [k for k in self.params if k not in arrays]
        if strict and missing:
            raise ContractError(f"checkpoint lacks parameters: {missing[:5]}")
        for k, p in self.params.items():
            if k not in arrays:
                continue
            a = np.asarray(arrays[k])
            if a.shape != p.shape:
                raise ContractError(f"parameter {k}: checkpoint shape {a.shape} != model shape {p.shape}")
            p.data[...] = a.astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


def init_linear(mod: Module, rng: Rng, name: str, n_in: int, n_out: int, zero: bool = False, bias: bool = True):
    std = 0.0 if zero else 1.0 / math.sqrt(n_in)
    w = np.zeros((n_in, n_out), np.float32) if zero else rng.child(name).normal((n_in, n_out), std)
    mod.add(f"{name}.w", w)
    if bias:
        mod.add(f"{name}.b", np.zeros(n_out, np.float32))


def linear(p: dict[str, Tensor], name: str, x: Tensor) -> Tensor:
    y = x @ p[f"{name}.w"]
    b = p.get(f"{name}.b")
    return y if b is None else y + b


def space_to_depth(x: Tensor, r: int) -> Tensor:
    """``[B, H, W, C] -> [B, H/r, W/r, r*r*C]``."""
    b, h, w, c = x.shape
    y = T.reshape(x, (b, h // r, r, w // r, r, c))
    y = T.transpose(y, (0, 1, 3, 2, 4, 5))
    return T.reshape(y, (b, h // r, w // r, r * r * c))


def depth_to_space(x: Tensor, r: int) -> Tensor:
    """``[B, H, W, r*r*C] -> [B, H*r, W*r, C]``; inverse of :func:`space_to_depth`."""
    b, h, w, c = x.shape
    co = c // (r * r)
    y = T.reshape(x, (b, h, w, r, r, co))
    y = T.transpose(y, (0, 1, 3, 2, 4, 5))
    return T.reshape(y, (b, h * r, w * r, co))


def conv3x3(p: dict[str, Tensor], name: str, x: Tensor) -> Tensor:
    """Same-padded 3x3 convolution over ``[B, H, W, C]`` via shifted slices."""
    b, h, w, c = x.shape
    xp = T.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = [xp[:, i : i + h, j : j + w, :] for i in range(3) for j in range(3)]
    return linear(p, name, T.concat(cols, axis=-1))


def init_conv3x3(mod: Module, rng: Rng, name: str, c_in: int, c_out: int) -> None:
    init_linear(mod, rng, name, 9 * c_in, c_out)
