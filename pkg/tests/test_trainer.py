import hashlib
import math

import numpy as np
import pytest

from occvla import checkpoint as ckpt
from occvla import tensor as T
from occvla import trainer
from occvla.errors import ContractError, TrainingError
from occvla.trainer import TrainConfig, joint_loss, model_tensors, read_log, run_stage

from conftest import tiny_config


def test_config_rejects_unknown_keys_and_bad_values(tmp_path):
    with pytest.raises(ContractError):
        TrainConfig.from_dict({"stage": 1, "learning_rate": 1.0})
    with pytest.raises(ContractError):
        TrainConfig.from_dict({"steps": 3})
    with pytest.raises(ContractError):
        TrainConfig(stage=2, lambda_occ=-1.0)
    with pytest.raises(ContractError):
        TrainConfig(stage=2, group_lr={})
    assert TrainConfig(stage=2, group_lr={}, decoder_lr_zero=False).group_lr == {}
    assert TrainConfig(stage=2).group_lr == {"codec.decoder.": 0.0}
    path = tmp_path / "c.json"
    path.write_text('{"stage": 0, "steps": 3}')
    assert TrainConfig.from_json(path).steps == 3


def _random_losses(seed=0, k=8):
    rng = np.random.default_rng(seed)
    text = T.Tensor(rng.normal(size=(2, 5, 11)).astype(np.float32), requires_grad=True)
    targets = rng.integers(0, 11, (2, 5))
    vox = T.Tensor(rng.normal(size=(2, 4, 4, 2, k)).astype(np.float32) * 0.01, requires_grad=True)
    grid = rng.integers(0, k, (2, 4, 4, 2))
    return text, targets, vox, grid


def test_joint_loss_lambda_examples():
    text, targets, vox, grid = _random_losses()
    l0, lt, lo = joint_loss(text, targets, vox, grid, 0.0)
    assert l0.item() == lt.item()
    l1 = joint_loss(text, targets, vox, grid, 1.0)[0].item()
    l2 = joint_loss(text, targets, vox, grid, 2.0)[0].item()
    assert abs((l2 - l0.item()) - 2 * (l1 - l0.item())) < 1e-9
    assert lo.item() == pytest.approx(math.log(8), abs=0.1)
    with pytest.raises(ContractError):
        joint_loss(text, targets, vox, grid[:, :3], 1.0)
    with pytest.raises(ContractError):
        joint_loss(text, targets, None, None, 1.0)


def test_stage_prerequisites(tiny_pipeline):
    root = tiny_pipeline
    with pytest.raises(ContractError):
        run_stage(tiny_config(root, 2, "bad"))
    with pytest.raises(ContractError):
        run_stage(tiny_config(root, 2, "bad", ckpt_in=[str(root / "s1.ckpt"), str(root / "s1.ckpt")]))
    with pytest.raises(ContractError):
        run_stage(tiny_config(root, 3, "bad", ckpt_in=[str(root / "s1.ckpt")]))
    with pytest.raises(ContractError):
        run_stage(tiny_config(root, 1, "bad", ckpt_in=[str(root / "s0.ckpt")]))


def test_stage2_zero_steps_is_a_no_op(tiny_pipeline):
    root = tiny_pipeline
    inputs = [str(root / "s0.ckpt"), str(root / "s1.ckpt")]
    run_stage(tiny_config(root, 2, "noop", ckpt_in=inputs, steps=0))
    out, _ = ckpt.load(root / "noop.ckpt")
    union = {}
    for p in inputs:
        union.update(model_tensors(ckpt.load(p)[0]))
    assert set(out) == set(union)
    for k in union:
        assert out[k].tobytes() == union[k].tobytes(), k


def test_stage2_zero_lr_decoder_and_loss_audit(tiny_pipeline):
    root = tiny_pipeline
    inputs = [str(root / "s0.ckpt"), str(root / "s1.ckpt")]
    res = run_stage(tiny_config(root, 2, "audit", ckpt_in=inputs, steps=5, lambda_occ=0.7))
    before = {}
    for p in inputs:
        before.update(model_tensors(ckpt.load(p)[0]))
    after, _ = ckpt.load(root / "audit.ckpt")
    decoder = [k for k in before if k.startswith("codec.decoder.")]
    assert decoder and all(after[k].tobytes() == before[k].tobytes() for k in decoder)
    adapters = [k for k in before if ".adapter_" in k]
    assert any(after[k].tobytes() != before[k].tobytes() for k in adapters)
    base = [k for k in before if k.startswith("vlm.") and ".adapter_" not in k and k != "vlm.occ_queries"]
    assert all(after[k].tobytes() == before[k].tobytes() for k in base)
    assert res.log[0]["proj_grad_norm"] > 0
    assert res.log[0]["decoder_grad_norm"] > 0
    for row in read_log(root / "audit.ckpt.csv"):
        assert abs(row["loss"] - (row["l_text"] + row["lambda"] * row["l_occ"])) < 1e-9


def test_lambda_zero_matches_text_only_run(tiny_pipeline):
    root = tiny_pipeline
    inputs = [str(root / "s0.ckpt"), str(root / "s1.ckpt")]
    a = run_stage(tiny_config(root, 2, "lam0", ckpt_in=inputs, lambda_occ=0.0))
    b = run_stage(tiny_config(root, 2, "textonly", ckpt_in=inputs, skip_occ=True))
    ta, tb = ckpt.load(root / "lam0.ckpt")[0], ckpt.load(root / "textonly.ckpt")[0]
    assert set(ta) == set(tb)
    assert all(ta[k].tobytes() == tb[k].tobytes() for k in ta)
    assert [r["l_text"] for r in a.log] == [r["l_text"] for r in b.log]
    assert [r["loss"] for r in a.log] == [r["l_text"] for r in a.log]


def _sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def test_reproducible_logs_and_checkpoints(tiny_pipeline):
    root = tiny_pipeline
    cfg = tiny_config(root, 1, "repro", steps=3)
    run_stage(cfg)
    first = (_sha(root / "repro.ckpt"), (root / "repro.ckpt.csv").read_bytes())
    run_stage(cfg)
    assert (_sha(root / "repro.ckpt"), (root / "repro.ckpt.csv").read_bytes()) == first


def test_resume_replays_uninterrupted_run(tiny_pipeline):
    root = tiny_pipeline
    full = run_stage(tiny_config(root, 1, "full", steps=4))
    run_stage(tiny_config(root, 1, "half", steps=2))
    resumed = run_stage(tiny_config(root, 1, "half", steps=4), resume=root / "half.ckpt")
    a, b = ckpt.load(root / "full.ckpt")[0], ckpt.load(root / "half.ckpt")[0]
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert [r["loss"] for r in read_log(root / "half.ckpt.csv")] == [r["loss"] for r in full.log]
    assert [r["step"] for r in resumed.log] == [3, 4]
    with pytest.raises(ContractError):
        run_stage(tiny_config(root, 1, "x", steps=4), resume=root / "s0.ckpt")


def test_nan_loss_aborts_with_step(tiny_pipeline, monkeypatch):
    root = tiny_pipeline
    real = trainer.joint_loss
    calls = {"n": 0}

    def poisoned(*args, **kwargs):
        calls["n"] += 1
        loss, lt, lo = real(*args, **kwargs)
        if calls["n"] == 3:
            loss = T.scale(loss, float("nan"))
        return loss, lt, lo

    monkeypatch.setattr(trainer, "joint_loss", poisoned)
    with pytest.raises(TrainingError) as info:
        run_stage(tiny_config(root, 1, "nan", steps=5))
    assert info.value.step == 3
    assert "step 3" in str(info.value)


def test_stage0_codebook_restarts_logged(tiny_pipeline):
    rows = read_log(tiny_pipeline / "s0.ckpt.csv")
    assert len(rows) == 6
    assert rows[2]["restarted"] is not None
    assert all(r["codes_used"] <= 128 for r in rows)


def test_stage3_overfits_small_split(tiny_pipeline):
    root = tiny_pipeline
    res = run_stage(tiny_config(root, 3, "overfit", ckpt_in=[str(root / "s2.ckpt")], train_limit=32,
                                batch_size=32, steps=1500, lr=3e-3, weight_decay=0.0,
                                teacher_force_meta=True, lr_schedule="cosine"))
    assert res.metrics["train_mse"] < 1e-3
    assert res.metrics["train_l2"][3] < 0.05
    # the VLM is frozen in stage 3
    before = ckpt.load(root / "s2.ckpt")[0]
    after = ckpt.load(root / "overfit.ckpt")[0]
    assert all(after[k].tobytes() == before[k].tobytes() for k in model_tensors(before))
