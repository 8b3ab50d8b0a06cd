from collections import Counter

import numpy as np
import pytest

from occvla.dataset import read_dataset
from occvla.evaluate import Report, evaluate, meta_scores, plan_report, qa_items, qa_report
from occvla.planner import plan_targets
from occvla.trainer import load_bundle


@pytest.fixture(scope="module")
def bundle_and_eval(tiny_pipeline):
    bundle, _ = load_bundle([tiny_pipeline / "s3.ckpt"])
    return bundle, read_dataset(tiny_pipeline / "data")[-8:]


def test_report_text_and_csv():
    rep = Report("t", ["method", "1s"], [["a", 0.5], ["b", None]])
    text = rep.to_text().splitlines()
    assert text[0] == "t" and "0.5000" in text[3] and text[4].strip().endswith("-")
    assert rep.to_csv() == "method,1s\na,0.5000\nb,-\n"


def test_plan_report_is_zero_for_perfect_plans(tiny_data):
    eps = read_dataset(tiny_data / "data")
    gt = plan_targets(eps)
    rep = plan_report(gt.copy(), gt)
    assert rep.rows[0][1:] == [0.0, 0.0, 0.0, 0.0]
    assert rep.columns == ["method", "1s", "2s", "3s", "avg"]


def test_majority_answer_oracle(tiny_data):
    eps = read_dataset(tiny_data / "data")
    items = list(qa_items(eps))
    majority, count = Counter(item["answer"] for _, item in items).most_common(1)[0]
    rep = qa_report(items, [majority] * len(items))
    assert rep.summary["overall"] == pytest.approx(count / len(items))


def test_meta_overall_bounded_by_components():
    rng = np.random.default_rng(0)
    vs, ds = ["MaintainSpeed", "Accelerate", "Decelerate"], ["GoStraight", "TurnLeft", "Stop"]
    for _ in range(20):
        gt = [(vs[rng.integers(3)], ds[rng.integers(3)]) for _ in range(30)]
        pred = [(vs[rng.integers(3)], ds[rng.integers(3)]) for _ in range(30)]
        s = meta_scores(gt, pred)
        assert s["overall"] <= min(s["velocity"], s["direction"])
        assert s["average"] == pytest.approx((s["velocity"] + s["direction"]) / 2)


@pytest.mark.parametrize("suite", ["qa", "plan", "meta"])
def test_text_suites_identical_with_and_without_occ_branch(bundle_and_eval, suite):
    bundle, eps = bundle_and_eval
    on = evaluate(bundle, eps, suite, skip_occ=False)
    off = evaluate(bundle, eps, suite, skip_occ=True)
    assert on.to_csv() == off.to_csv()
    if suite == "plan":
        assert on.summary["pred"].tobytes() == off.summary["pred"].tobytes()


def test_occ_suite_table(bundle_and_eval):
    bundle, eps = bundle_and_eval
    rep = evaluate(bundle, eps, "occ")
    assert 0.0 <= rep.summary["miou"] <= 1.0
    assert len(rep.rows) == 8 + 2
    assert rep.summary["miou"] == rep.summary["miou_non_empty"]
