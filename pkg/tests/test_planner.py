import dataclasses

import numpy as np
import pytest

from occvla import tensor as T
from occvla.annotate import MetaAction
from occvla.dataset import generate_dataset
from occvla.errors import ShapeError
from occvla.optim import AdamW
from occvla.planner import Planner, PlanInput, l2_at_horizons, plan_input_from_episodes, plan_targets


def make_input(b=4, seed=0, meta=None):
    rng = np.random.default_rng(seed)
    meta = meta or [MetaAction("MaintainSpeed", "GoStraight")] * b
    return PlanInput(meta, rng.normal(size=(b, 2)), rng.normal(size=(b, 64)), rng.normal(size=(b, 8)))


def test_zero_init_plan_and_determinism():
    p = Planner(seed=0)
    inp = make_input()
    out = p.plan(inp).data
    assert out.shape == (4, 6, 2)
    assert not out.any()
    p.params["planner.out.w"].data[:] = 0.1
    np.testing.assert_array_equal(p.plan(inp).data, p.plan(inp).data)


def test_plan_input_has_no_navigation_field():
    names = {f.name for f in dataclasses.fields(PlanInput)}
    assert names == {"meta", "prev_velocity", "visual_summary", "past_traj"}


def test_history_ablation_zeroes_only_history():
    inp = make_input()
    ab = inp.without_history()
    assert not ab.past_traj.any() and ab.past_traj.shape == inp.past_traj.shape
    np.testing.assert_array_equal(ab.prev_velocity, inp.prev_velocity)
    np.testing.assert_array_equal(ab.visual_summary, inp.visual_summary)


def test_plan_input_validation():
    with pytest.raises(ShapeError):
        PlanInput([MetaAction("MaintainSpeed", "Stop")], np.zeros((1, 3)), np.zeros((1, 64)), np.zeros((1, 8)))
    with pytest.raises(ValueError):
        PlanInput([MetaAction("MaintainSpeed", "Stop")], [[np.nan, 0]], np.zeros((1, 64)), np.zeros((1, 8)))


def test_meta_embedding_structure():
    p = Planner(seed=1)
    a = p.embed_meta([MetaAction("Accelerate", "TurnLeft")]).data
    b = p.embed_meta([MetaAction("Accelerate", "TurnLeft")]).data
    c = p.embed_meta([MetaAction("Decelerate", "TurnLeft")]).data
    np.testing.assert_array_equal(a, b)
    assert (a[0, :16] != c[0, :16]).any()
    np.testing.assert_array_equal(a[0, 16:], c[0, 16:])


def test_l2_examples():
    rng = np.random.default_rng(2)
    gt = rng.normal(size=(3, 6, 2))
    assert l2_at_horizons(gt, gt) == (0.0, 0.0, 0.0, 0.0)
    shifted = gt + np.array([0.3, 0.4])
    assert l2_at_horizons(shifted, gt) == pytest.approx((0.5, 0.5, 0.5, 0.5), abs=1e-12)
    with pytest.raises(ShapeError):
        l2_at_horizons(gt[:, :5], gt[:, :5])
    with pytest.raises(ShapeError):
        l2_at_horizons(gt, gt[:2])


def test_l2_matches_scalar_hand_computation():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(1, 5))
        pred, gt = rng.normal(size=(n, 6, 2)), rng.normal(size=(n, 6, 2))
        hand = []
        for wp in (1, 3, 5):
            total = 0.0
            for i in range(n):
                dx = pred[i, wp, 0] - gt[i, wp, 0]
                dy = pred[i, wp, 1] - gt[i, wp, 1]
                total += (dx * dx + dy * dy) ** 0.5
            hand.append(total / n)
        got = l2_at_horizons(pred, gt)
        for a, b in zip(got, hand + [sum(hand) / 3]):
            assert abs(a - b) < 1e-9


@pytest.fixture(scope="module")
def trained():
    eps = generate_dataset(21, 300)
    summary = np.zeros((len(eps), 64), np.float32)
    inp = plan_input_from_episodes(eps, [e.meta for e in eps], summary)
    tgt = plan_targets(eps)
    p = Planner(seed=0)
    opt = AdamW(p.params, lr=2e-3, weight_decay=0.0)
    rng = np.random.default_rng(0)
    touched = {}
    for step in range(1500):
        idx = rng.choice(len(eps), 64, replace=False)
        sub = PlanInput([inp.meta[i] for i in idx], inp.prev_velocity[idx], inp.visual_summary[idx], inp.past_traj[idx])
        opt.zero_grad()
        T.backward(T.mse(p.plan(sub), T.Tensor(tgt[idx])))
        for name in ("planner.vel_emb", "planner.dir_emb"):
            touched[name] = touched.get(name, False) or bool(np.abs(p.params[name].grad).max() > 0)
        opt.step()
    return p, touched


def test_gradient_reaches_both_embedding_tables(trained):
    _, touched = trained
    assert touched == {"planner.vel_emb": True, "planner.dir_emb": True}


def test_stop_meta_at_rest_stays_put(trained):
    p, _ = trained
    metas = [MetaAction(v, "Stop") for v in ("MaintainSpeed", "Decelerate")]
    inp = PlanInput(metas, np.zeros((2, 2)), np.zeros((2, 64)), np.zeros((2, 8)))
    wp6 = p.plan(inp).data[:, 5]
    assert (np.linalg.norm(wp6, axis=1) < 0.3).all()
