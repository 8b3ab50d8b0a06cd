import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from occvla import tensor as T
from occvla.errors import ContractError, NumericDomainError, ShapeError
from occvla.gradcheck import check_gradients, run_op_suite
from occvla.optim import AdamW
from occvla.rng import Rng
from occvla.tensor import Tensor, backward


def naive_matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i][j] += a[i][t] * b[t][j]
    return out


def test_matmul_against_triple_loop():
    a = [[1.0, 2.0], [3.0, 4.0]]
    b = [[5.0], [6.0]]
    assert naive_matmul(a, b) == [[17.0], [39.0]]
    out = T.matmul(Tensor(a), Tensor(b))
    np.testing.assert_array_equal(out.data, np.array(naive_matmul(a, b), dtype=np.float32))


def test_matmul_identity_and_zero():
    a = Tensor(Rng(1).normal((4, 4)))
    np.testing.assert_array_equal((a @ Tensor(np.eye(4, dtype=np.float32))).data, a.data)
    np.testing.assert_array_equal((a @ T.zeros((4, 4))).data, np.zeros((4, 4), np.float32))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.zeros((2, 3)), T.zeros((2, 3)))


def test_matmul_associativity_float64():
    rng = Rng(3)
    for i in range(20):
        r = rng.child(i)
        m, k, n, p = (int(s) for s in r.integers(1, 9, 4))
        a = Tensor(r.normal((m, k), dtype=np.float64))
        b = Tensor(r.normal((k, n), dtype=np.float64))
        c = Tensor(r.normal((n, p), dtype=np.float64))
        left = ((a @ b) @ c).data
        right = (a @ (b @ c)).data
        assert np.linalg.norm(left - right) <= 1e-6 * max(np.linalg.norm(left), 1e-12)


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    big = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big))
    assert big[0] == pytest.approx(1.0) and big[1] == pytest.approx(0.0, abs=1e-30)
    e = [math.exp(v) for v in (1.0, 2.0, 3.0)]
    oracle = [v / sum(e) for v in e]
    np.testing.assert_allclose(T.softmax(Tensor([1.0, 2.0, 3.0], dtype=np.float64)).data, oracle, atol=1e-12)
    np.testing.assert_allclose(oracle, [0.09003, 0.24473, 0.66524], atol=1e-5)


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericDomainError):
        T.softmax(Tensor([np.nan, 1.0]))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(rows, cols, seed):
    x = Tensor(Rng(seed).normal((rows, cols), 5.0, np.float64))
    s = T.softmax(x, axis=-1).data
    assert np.all(np.abs(s.sum(axis=-1) - 1) < 1e-9)
    assert np.all((s >= 0) & (s <= 1))


def test_cross_entropy_examples():
    logits = np.zeros((3, 5), np.float64)
    targets = np.array([0, 3, 4])
    logits[np.arange(3), targets] = 30.0
    assert T.cross_entropy(Tensor(logits), targets).item() < 1e-8
    assert T.cross_entropy(Tensor(np.zeros((4, 8))), [1, 2, 3, 4]).item() == pytest.approx(math.log(8))
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    loss = T.cross_entropy(x, [-100, -100])
    assert loss.item() == 0.0
    backward(loss)
    np.testing.assert_array_equal(x.grad, np.zeros((2, 3)))


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        T.cross_entropy(T.zeros((2, 3)), [0, 3])


def test_mse_examples():
    a = Tensor([1.0, 2.0])
    assert T.mse(a, Tensor([1.0, 2.0])).item() == 0.0
    assert T.mse(Tensor(np.full((3, 2), 5.0)), Tensor(np.full((3, 2), 3.0))).item() == 4.0
    assert T.mse(a, Tensor([0.0, 0.0])).item() == 2.5
    with pytest.raises(ShapeError):
        T.mse(a, Tensor([1.0]))


def test_backward_square():
    x = Tensor([3.0], requires_grad=True)
    backward(T.tsum(x * x))
    np.testing.assert_array_equal(x.grad, [6.0])


def test_backward_matmul_sum_matches_finite_differences():
    rng = Rng(5)
    a = Tensor(rng.normal((3, 4), dtype=np.float64), requires_grad=True)
    b = Tensor(rng.normal((4, 2), dtype=np.float64), requires_grad=True)
    results = check_gradients(lambda: T.tsum(a @ b), {"a": a, "b": b}, h=1e-5)
    assert all(r.rel_error < 1e-4 for r in results)
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T)


def test_backward_accumulates_until_zeroed():
    x = Tensor([1.0, -2.0], requires_grad=True)
    loss = T.tsum(x * x * 3.0)
    backward(loss)
    first = x.grad.copy()
    backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * first)
    x.zero_grad()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_backward_non_scalar_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_no_grad_records_no_lineage():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


def test_lineage_is_acyclic_and_grad_shapes_match():
    rng = Rng(2)
    w = Tensor(rng.normal((3, 3)), requires_grad=True)
    h = T.gelu(Tensor(rng.normal((2, 3))) @ w)
    loss = T.mean(h @ w)
    order = T._topological_order(loss)
    assert len(order) == len({id(n) for n in order})
    backward(loss)
    assert w.grad.shape == w.shape and w.grad.dtype == w.dtype


def test_op_suite_finite_differences():
    errors = run_op_suite(n_shapes=20)
    worst = {name: max(v) for name, v in errors.items()}
    assert all(len(v) >= 20 for v in errors.values())
    assert all(e < 1e-4 for e in worst.values()), worst


def test_rng_bitwise_reproducible():
    a, b = Rng(11), Rng(11)
    np.testing.assert_array_equal(a.normal((5, 5)), b.normal((5, 5)))
    assert a.uniform((3,)).tobytes() == b.uniform((3,)).tobytes()
    assert Rng(11).child("x").normal((4,)).tobytes() == Rng(11).child("x").normal((4,)).tobytes()
    assert Rng(11).child("x").normal((4,)).tobytes() != Rng(11).child("y").normal((4,)).tobytes()


def _param_with_grad(value, grad):
    p = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
    p.grad = np.array(grad, dtype=np.float64)
    return p


def test_adamw_zero_grad_no_decay_is_noop():
    p = _param_with_grad([[1.0, -2.0]], [[0.0, 0.0]])
    before = p.data.tobytes()
    AdamW({"w": p}, lr=0.1, weight_decay=0.0).step()
    assert p.data.tobytes() == before


def test_adamw_zero_lr_group_keeps_bytes_but_updates_moments():
    p = _param_with_grad([[1.0, -2.0]], [[0.5, -0.25]])
    q = _param_with_grad([[1.0, -2.0]], [[0.5, -0.25]])
    opt = AdamW({"dec.w": p, "enc.w": q}, lr=0.1, group_lr={"dec.": 0.0})
    before = p.data.tobytes()
    opt.step()
    assert p.data.tobytes() == before
    assert np.any(opt.m["dec.w"] != 0) and np.any(opt.v["dec.w"] != 0)
    assert q.data.tobytes() != before


def test_adamw_first_step_closed_form():
    p = _param_with_grad([2.0], [1.0])
    AdamW({"s": p}, lr=0.1, betas=(0.9, 0.999), weight_decay=0.0).step()
    # first step: m_hat = v_hat = g, so the update is lr * g / (|g| + eps)
    assert p.data[0] == pytest.approx(2.0 - 0.1, abs=1e-7)


def test_adamw_missing_gradient():
    p = Tensor([1.0], requires_grad=True)
    with pytest.raises(ContractError):
        AdamW({"p": p}).step()
