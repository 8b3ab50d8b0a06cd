"""AdamW with per-group learning-rate overrides."""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .tensor import Tensor


class AdamW:
    """Adam with decoupled weight decay.

    ``group_lr`` maps parameter-name prefixes to learning rates; the longest
    matching prefix wins.  A group learning rate of exactly 0 leaves the
    parameter bytes untouched while its moment estimates keep updating, so the
    parameter still sits in the gradient path.  Weight decay applies to
    matrices only (``ndim >= 2``); gains, biases and vectors are not decayed.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 3e-4,
        betas: tuple[float, float] = (0.9, 0.95),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
        group_lr: dict[str, float] | None = None,
    ):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.group_lr = dict(group_lr or {})
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def lr_for(self, name: str) -> float:
        best, lr = -1, self.lr
        for prefix, value in self.group_lr.items():
            if name.startswith(prefix) and len(prefix) > best:
                best, lr = len(prefix), float(value)
        return lr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient")
            if p.grad.shape != p.data.shape or self.m[name].shape != p.data.shape:
                raise ContractError(f"optimizer state for {name!r} does not match parameter shape")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**t
        bc2 = 1.0 - b2**t
        for name, p in self.params.items():
            g = p.grad
            m, v = self.m[name], self.v[name]
            dt = p.data.dtype.type
            m *= dt(b1)
            m += dt(1.0 - b1) * g
            v *= dt(b2)
            v += dt(1.0 - b2) * (g * g)
            lr = self.lr_for(name)
            if lr == 0.0:
                continue
            update = (m / dt(bc1)) / (np.sqrt(v / dt(bc2)) + dt(self.eps))
            if self.weight_decay and p.data.ndim >= 2:
                update = update + dt(self.weight_decay) * p.data
            p.data -= dt(lr) * update

    # -- persistence ------------------------------------------------------
    def hyperparameters(self) -> dict:
        return {
            "lr": self.lr,
            "betas": [self.beta1, self.beta2],
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "group_lr": self.group_lr,
            "step": self.step_count,
        }

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"optim.m.{name}"] = self.m[name]
            out[f"optim.v.{name}"] = self.v[name]
        return out

    def load_state(self, hyper: dict, tensors: dict[str, np.ndarray]) -> None:
        self.step_count = int(hyper["step"])
        for name in self.params:
            m = tensors.get(f"optim.m.{name}")
            v = tensors.get(f"optim.v.{name}")
            if m is None or v is None:
                raise ContractError(f"optimizer state missing for {name!r}")
            if m.shape != self.params[name].shape:
                raise ContractError(f"optimizer state shape mismatch for {name!r}")
            self.m[name] = m.copy()
            self.v[name] = v.copy()
