import json

import pytest

from occvla import occgrid
from occvla.cli import main
from occvla.dataset import read_dataset

from conftest import TINY_MODEL


def test_cli_end_to_end(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["gen-data", "--seed", "3", "--count", "12", "--out", str(data)]) == 0
    assert read_dataset(data)[0].meta is None
    assert main(["annotate", str(data)]) == 0
    assert read_dataset(data)[0].meta is not None

    def config(stage, name, **kw):
        cfg = dict(stage=stage, dataset=str(data), eval_count=4, ckpt_out=str(tmp_path / f"{name}.ckpt"), steps=2,
                   batch_size=4)
        if stage:
            cfg["model"] = TINY_MODEL
        cfg.update(kw)
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(cfg))
        return str(path)

    assert main(["train", "--stage", "0", "--config", config(0, "s0")]) == 0
    assert main(["train", "--stage", "1", "--config", config(1, "s1")]) == 0
    s2 = config(2, "s2", ckpt_in=[str(tmp_path / "s0.ckpt"), str(tmp_path / "s1.ckpt")])
    assert main(["train", "--stage", "2", "--config", s2]) == 0
    assert main(["train", "--stage", "3", "--config", config(3, "s3", ckpt_in=[str(tmp_path / "s2.ckpt")])]) == 0
    capsys.readouterr()

    ck = str(tmp_path / "s3.ckpt")
    assert main(["eval", "--suite", "plan", "--ckpt", ck, "--out", str(tmp_path / "plan")]) == 0
    out = capsys.readouterr().out
    assert "method,1s,2s,3s,avg" in out
    assert (tmp_path / "plan.txt").exists() and (tmp_path / "plan.csv").exists()
    assert main(["eval", "--suite", "plan", "--ckpt", ck, "--no-ego-history"]) == 0
    assert "no ego history" in capsys.readouterr().out
    for suite in ("qa", "occ", "meta"):
        assert main(["eval", "--suite", suite, "--ckpt", ck, "--skip-occ"]) == 0
    capsys.readouterr()

    dump = tmp_path / "pred.occ"
    assert main(["infer", "--ckpt", ck, "--episode", "9", "--dump-occ", str(dump)]) == 0
    assert "meta:" in capsys.readouterr().out
    assert occgrid.load(dump).shape == (32, 32, 8)


def test_cli_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"stage": 1, "bogus": 1}))
    assert main(["train", "--stage", "1", "--config", str(bad)]) == 2
    assert "bogus" in capsys.readouterr().err
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"stage": 1}))
    assert main(["train", "--stage", "2", "--config", str(good)]) == 2
    with pytest.raises(SystemExit):
        main(["eval", "--suite", "nope", "--ckpt", "x"])
