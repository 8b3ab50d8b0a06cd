import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from occvla import tensor as T
from occvla.codec import Codec, CodecConfig, ConfusionMatrix, Projector, class_weights, codec_loss, miou, quantize
from occvla.errors import ContractError, ShapeError
from occvla.optim import AdamW
from occvla.rng import Rng
from occvla.scene import VEHICLE, empty_scene, generate_episode, voxelize


def test_encode_shape_and_determinism():
    codec = Codec(seed=0)
    g = generate_episode(3).grid
    a = codec.encode(g).data
    assert a.shape == (1, 8, 8, 16)
    np.testing.assert_array_equal(a, codec.encode(g.copy()).data)
    with pytest.raises(ShapeError):
        codec.encode(np.zeros((32, 32, 4), np.uint8))


def test_empty_and_vehicle_latents_differ():
    codec = Codec(seed=0)
    empty = np.zeros((32, 32, 8), np.uint8)
    car = empty.copy()
    car[14:18, 15:17, 0:2] = VEHICLE
    diff = np.abs(codec.encode(empty).data - codec.encode(car).data).max(axis=-1)
    assert (diff > 0).sum() >= 1


def test_quantize_exact_code_and_tie():
    rng = np.random.default_rng(0)
    book = T.Tensor(rng.normal(size=(12, 4)))
    z = T.Tensor(book.data[7][None, None, :].copy(), requires_grad=True)
    q = quantize(z, book)
    assert q.codes.item() == 7
    assert q.codebook_loss.item() == 0.0 and q.commitment_loss.item() == 0.0
    book.data[:] = 10.0
    book.data[3] = [1.0, 0, 0, 0]
    book.data[9] = [-1.0, 0, 0, 0]
    tie = quantize(T.Tensor(np.zeros((1, 4))), book)
    assert tie.codes.item() == 3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_quantize_properties(seed):
    rng = np.random.default_rng(seed)
    book = T.Tensor(rng.normal(size=(int(rng.integers(1, 20)), 3)))
    z = T.Tensor(rng.normal(size=(5, 3)))
    q = quantize(z, book)
    assert q.codes.max() < book.shape[0] and q.codes.min() >= 0
    assert (q.cell_codebook_loss >= 0).all() and (q.cell_commitment_loss >= 0).all()
    brute = np.argmin(((z.data[:, None] - book.data[None]) ** 2).sum(-1), axis=1)
    np.testing.assert_array_equal(q.codes, brute)


def test_straight_through_gradient():
    rng = np.random.default_rng(1)
    book = T.Tensor(rng.normal(size=(16, 4)))
    z = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = rng.normal(size=(3, 4))
    q = quantize(z, book, beta=0.0)
    out = T.tsum(T.mul(q.quantized, T.Tensor(w)))
    T.backward(out)
    # downstream loss as a function of the quantized values has gradient w
    e = T.Tensor(q.quantized.data.copy(), requires_grad=True)
    fd = np.zeros_like(w)
    h = 1e-6
    for idx in np.ndindex(*w.shape):
        up, down = e.data.copy(), e.data.copy()
        up[idx] += h
        down[idx] -= h
        fd[idx] = ((up * w).sum() - (down * w).sum()) / (2 * h)
    np.testing.assert_allclose(z.grad, fd, atol=1e-6)


def test_decode_shape_and_determinism():
    codec = Codec(seed=2)
    lat = T.Tensor(np.random.default_rng(0).normal(size=(2, 8, 8, 16)).astype(np.float32))
    out = codec.decode(lat).data
    assert out.shape == (2, 32, 32, 8, 8)
    np.testing.assert_array_equal(out, codec.decode(lat).data)
    with pytest.raises(ShapeError):
        codec.decode(T.Tensor(np.zeros((1, 4, 4, 16), np.float32)))


def test_overfit_sixteen_grids():
    grids = np.stack([generate_episode(100 + i).grid for i in range(16)])
    codec = Codec(seed=3)
    rng = Rng(3)
    with T.no_grad():
        codec.init_codebook_from(codec.encode(grids).data, rng)
    opt = AdamW(codec.params, lr=3e-3, weight_decay=0.0)
    for _ in range(200):
        opt.zero_grad()
        total, *_ = codec_loss(codec, grids)
        T.backward(total)
        opt.step()
    acc = (codec.reconstruct(grids) == grids).mean()
    assert acc > 0.95


def test_projector_contracts():
    proj = Projector(d_model=12, seed=0)
    proj.params["proj.b"].data[:] = np.arange(16, dtype=np.float32)
    zero = proj(T.Tensor(np.zeros((1, 64, 12), np.float32))).data
    np.testing.assert_array_equal(zero, np.broadcast_to(np.arange(16, dtype=np.float32), (1, 8, 8, 16)))
    h = np.random.default_rng(0).normal(size=(1, 64, 12)).astype(np.float32)
    perm = np.random.default_rng(1).permutation(64)
    a = proj(T.Tensor(h)).data.reshape(64, 16)
    b = proj(T.Tensor(h[:, perm])).data.reshape(64, 16)
    np.testing.assert_array_equal(b, a[perm])
    with pytest.raises(ContractError):
        proj(T.Tensor(np.zeros((1, 63, 12), np.float32)))


def test_voxel_loss_reaches_occ_hidden():
    proj = Projector(d_model=12, seed=0)
    codec = Codec(seed=0)
    h = T.Tensor(np.random.default_rng(2).normal(size=(1, 64, 12)).astype(np.float32), requires_grad=True)
    logits = codec.decode(proj(h))
    loss = T.cross_entropy(logits, generate_episode(0).grid[None].astype(np.int64))
    T.backward(loss)
    assert np.abs(h.grad).max() > 0


def test_miou_examples():
    g = generate_episode(5).grid
    assert miou(g, g)[0] == 1.0
    pred = np.zeros(5, np.int64)
    gt = np.zeros(5, np.int64)
    pred[[1, 2]] = 3
    gt[[2, 3]] = 3
    _, table = miou(pred, gt, ignore_empty=True)
    assert table[3] == pytest.approx(1 / 3)
    assert miou(pred, gt, ignore_empty=True)[0] == pytest.approx(1 / 3)
    assert table[5] is None
    with pytest.raises(ShapeError):
        miou(pred, gt[:4])


def brute_miou(pred, gt, k, ignore_empty):
    vals = []
    for c in range(k):
        if ignore_empty and c == 0:
            continue
        inter = union = 0
        in_gt = False
        for p, q in zip(pred.reshape(-1), gt.reshape(-1)):
            inter += p == c and q == c
            union += p == c or q == c
            in_gt = in_gt or q == c
        if in_gt:
            vals.append(inter / union)
    return float(np.mean(vals))


def test_miou_matches_brute_force():
    rng = np.random.default_rng(7)
    for i in range(50):
        shape = (4, 4, 3)
        gt = rng.integers(0, 8, shape)
        pred = np.where(rng.random(shape) < 0.5, gt, rng.integers(0, 8, shape))
        flag = bool(i % 2)
        assert miou(pred, gt, ignore_empty=flag)[0] == pytest.approx(brute_miou(pred, gt, 8, flag), abs=1e-9)


def test_confusion_merge_equals_joint_update():
    rng = np.random.default_rng(8)
    a, b = rng.integers(0, 8, (2, 100)), rng.integers(0, 8, (2, 100))
    joint = ConfusionMatrix().update(np.concatenate([a[0], b[0]]), np.concatenate([a[1], b[1]]))
    merged = ConfusionMatrix().update(a[0], a[1]).merge(ConfusionMatrix().update(b[0], b[1]))
    np.testing.assert_array_equal(joint.counts, merged.counts)


def test_class_weights_normalised():
    grids = [voxelize(empty_scene())]
    w = class_weights(grids)
    freq = np.bincount(grids[0].reshape(-1), minlength=8) / grids[0].size
    assert (freq * w).sum() == pytest.approx(1.0)
    present = freq > 0
    assert w[present][np.argmax(freq[present])] == w[present].min()
