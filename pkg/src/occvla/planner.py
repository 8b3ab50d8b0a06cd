"""Waypoint planning head and the horizon L2 metric.

The planner sees only the meta action, the ego velocity at t = 0, a pooled
visual summary and (optionally) the ego history; there is no route or goal
input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .annotate import DIRECTION_ACTIONS, VELOCITY_ACTIONS, MetaAction
from .errors import ShapeError
from .nn import Module, init_linear, linear
from .rng import Rng
from .tensor import Tensor

N_WAYPOINTS = 6
HORIZON_INDEX = (1, 3, 5)  # waypoints at 1 s, 2 s, 3 s (2 Hz sampling)
EMBED_DIM = 16
POSITION_SCALE = 10.0


@dataclass
class PlanInput:
    meta: list
    prev_velocity: np.ndarray
    visual_summary: np.ndarray
    past_traj: np.ndarray

    def __post_init__(self):
        b = len(self.meta)
        self.prev_velocity = np.asarray(self.prev_velocity, dtype=np.float32)
        self.visual_summary = np.asarray(self.visual_summary, dtype=np.float32)
        self.past_traj = np.asarray(self.past_traj, dtype=np.float32).reshape(b, -1)
        if self.prev_velocity.shape != (b, 2):
            raise ShapeError(f"prev_velocity must be [{b}, 2], got {self.prev_velocity.shape}")
        if self.visual_summary.ndim != 2 or self.visual_summary.shape[0] != b:
            raise ShapeError(f"visual_summary must be [{b}, d], got {self.visual_summary.shape}")
        if self.past_traj.shape != (b, 8):
            raise ShapeError(f"past_traj must hold 4 (x, y) pairs per sample, got {self.past_traj.shape}")
        for name in ("prev_velocity", "visual_summary", "past_traj"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")

    def without_history(self) -> "PlanInput":
        """The ego-trajectory ablation: history zeroed, layout unchanged."""
        return PlanInput(self.meta, self.prev_velocity, self.visual_summary, np.zeros_like(self.past_traj))


def meta_ids(metas) -> tuple[np.ndarray, np.ndarray]:
    v = np.array([VELOCITY_ACTIONS.index(m[0]) for m in metas], dtype=np.int64)
    d = np.array([DIRECTION_ACTIONS.index(m[1]) for m in metas], dtype=np.int64)
    return v, d


class Planner(Module):
    def __init__(self, d_visual: int = 64, hidden: int = 128, seed: int = 0):
        super().__init__()
        rng = Rng(seed).child("planner")
        self.d_visual = d_visual
        self.add("planner.vel_emb", rng.child("vel").normal((len(VELOCITY_ACTIONS), EMBED_DIM), 1.0))
        self.add("planner.dir_emb", rng.child("dir").normal((len(DIRECTION_ACTIONS), EMBED_DIM), 1.0))
        n_in = 2 * EMBED_DIM + 2 + d_visual + 8
        init_linear(self, rng, "planner.fc1", n_in, hidden)
        init_linear(self, rng, "planner.fc2", hidden, hidden)
        init_linear(self, rng, "planner.out", hidden, 2 * N_WAYPOINTS, zero=True)

    def embed_meta(self, metas) -> Tensor:
        v, d = meta_ids(metas)
        return T.concat(
            [T.embedding(self.params["planner.vel_emb"], v), T.embedding(self.params["planner.dir_emb"], d)], axis=-1
        )

    def features(self, inp: PlanInput) -> Tensor:
        dt = self.params["planner.fc1.w"].dtype
        rest = np.concatenate(
            [inp.prev_velocity / POSITION_SCALE, inp.visual_summary, inp.past_traj / POSITION_SCALE], axis=1
        ).astype(dt)
        return T.concat([self.embed_meta(inp.meta), Tensor(rest)], axis=-1)

    def plan(self, inp: PlanInput) -> Tensor:
        """``[B, 6, 2]`` future (x, y) offsets in metres."""
        p = self.params
        h = T.gelu(linear(p, "planner.fc1", self.features(inp)))
        h = T.gelu(linear(p, "planner.fc2", h))
        out = T.scale(linear(p, "planner.out", h), POSITION_SCALE)
        return T.reshape(out, (len(inp.meta), N_WAYPOINTS, 2))


def l2_at_horizons(pred, gt) -> tuple[float, float, float, float]:
    """Mean displacement at 1 s, 2 s, 3 s and their average.

    Inputs are ``[B, 6, 2]`` (or a single ``[6, 2]`` plan).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"plan shapes differ: {pred.shape} vs {gt.shape}")
    if pred.shape[-2:] != (N_WAYPOINTS, 2):
        raise ShapeError(f"plans must have {N_WAYPOINTS} (x, y) waypoints, got {pred.shape}")
    pred = pred.reshape(-1, N_WAYPOINTS, 2)
    gt = gt.reshape(-1, N_WAYPOINTS, 2)
    dist = np.sqrt(((pred - gt) ** 2).sum(-1))
    per = [float(dist[:, i].mean()) for i in HORIZON_INDEX]
    return per[0], per[1], per[2], float(np.mean(per))


def plan_input_from_episodes(episodes, metas, visual_summary, use_ego_history: bool = True) -> PlanInput:
    prev = np.array([[ep.scene.ego.speed, 0.0] for ep in episodes], dtype=np.float32)
    past = np.stack([np.asarray(ep.past_traj)[:, 1:3] for ep in episodes]).reshape(len(episodes), 8)
    inp = PlanInput([tuple(m) for m in metas], prev, visual_summary, past)
    return inp if use_ego_history else inp.without_history()


def plan_targets(episodes) -> np.ndarray:
    return np.stack([np.asarray(ep.future_traj)[:, 1:3] for ep in episodes]).astype(np.float32)


__all__ = [
    "MetaAction",
    "PlanInput",
    "Planner",
    "l2_at_horizons",
    "plan_input_from_episodes",
    "plan_targets",
]
