import pytest

from occvla.dataset import generate_dataset, write_dataset
from occvla.trainer import TrainConfig, run_stage

TINY_MODEL = {"d_model": 16, "n_layers": 1, "n_heads": 2, "ffn_width": 32, "adapter_bottleneck": 4}


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    write_dataset(generate_dataset(11, 40), root / "data", {"seed": 11})
    return root


def tiny_config(root, stage, name, **kw):
    base = dict(stage=stage, dataset=str(root / "data"), eval_count=8, ckpt_out=str(root / f"{name}.ckpt"),
                steps=4, batch_size=4, seed=0, lr=1e-3)
    if stage in (1, 2, 3):
        base["model"] = TINY_MODEL
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_pipeline(tiny_data):
    root = tiny_data
    run_stage(tiny_config(root, 0, "s0", steps=6, codec_restart_every=3))
    run_stage(tiny_config(root, 1, "s1", steps=6))
    run_stage(tiny_config(root, 2, "s2", ckpt_in=[str(root / "s0.ckpt"), str(root / "s1.ckpt")]))
    run_stage(tiny_config(root, 3, "s3", ckpt_in=[str(root / "s2.ckpt")], steps=20, batch_size=16))
    return root


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
