"""Seeded random streams.

There is no global generator: every stochastic routine receives an
:class:`Rng` (or a seed) explicitly.  Named child streams are derived from the
parent seed with a stable hash, so ``Rng(7).child("codec")`` is the same
stream in every process.
"""

from __future__ import annotations

import zlib

import numpy as np

from .tensor import Tensor


def _key(name: str | int) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name)
    return zlib.crc32(name.encode("utf-8"))


class Rng:
    def __init__(self, seed: int | tuple = 0):
        self.entropy = seed if isinstance(seed, tuple) else (int(seed),)
        self.generator = np.random.Generator(np.random.PCG64(list(self.entropy)))

    def child(self, name: str | int) -> "Rng":
        return Rng(self.entropy + (_key(name),))

    def normal(self, shape, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        return (self.generator.standard_normal(shape) * std).astype(dtype)

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0, dtype=np.float64):
        out = self.generator.uniform(low, high, shape)
        return out if shape is None else out.astype(dtype)

    def integers(self, low: int, high: int | None = None, size=None):
        return self.generator.integers(low, high, size)

    def choice(self, n, size=None, replace: bool = True, p=None):
        return self.generator.choice(n, size=size, replace=replace, p=p)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def get_state(self) -> dict:
        return {"entropy": list(self.entropy), "bit_generator": self.generator.bit_generator.state}

    def set_state(self, state: dict) -> None:
        self.entropy = tuple(state["entropy"])
        self.generator.bit_generator.state = state["bit_generator"]


def normal_param(rng: Rng, shape, std: float, dtype=np.float32) -> Tensor:
    return Tensor(rng.normal(shape, std, dtype), requires_grad=True)


def uniform_param(rng: Rng, shape, bound: float, dtype=np.float32) -> Tensor:
    return Tensor(rng.uniform(shape, -bound, bound, dtype), requires_grad=True)


def zeros_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)
