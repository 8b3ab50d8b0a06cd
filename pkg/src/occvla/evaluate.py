"""Evaluation suites: planning L2, QA exact match, occupancy mIoU and
meta-action accuracy.

Every suite returns a :class:`Report` that renders as aligned text and CSV.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import TokenBatch, VLOModel, greedy_loop, views_to_input
from .codec import ConfusionMatrix
from .corpus import encode_prompt, qa_prompt
from .errors import ContractError
from .planner import l2_at_horizons, plan_targets
from .scene import CLASS_NAMES
from .tokenizer import Tokenizer
from .trainer import ModelBundle, planner_inputs, predict_meta

SUITES = ("plan", "qa", "occ", "meta")


@dataclass
class Report:
    title: str
    columns: list[str]
    rows: list[list] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_text(self) -> str:
        cells = [self.columns] + [[_cell(v) for v in r] for r in self.rows]
        widths = [max(len(r[i]) for r in cells) for i in range(len(self.columns))]
        lines = [self.title]
        for i, r in enumerate(cells):
            lines.append("  ".join(c.rjust(w) if j else c.ljust(w) for j, (c, w) in enumerate(zip(r, widths))))
            if i == 0:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_cell(v) for v in r])
        return buf.getvalue()

    def write(self, stem) -> tuple[Path, Path]:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        txt, csv_path = stem.with_suffix(".txt"), stem.with_suffix(".csv")
        txt.write_text(self.to_text(), encoding="utf-8")
        csv_path.write_text(self.to_csv(), encoding="utf-8")
        return txt, csv_path


def _cell(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


# -- decoding -----------------------------------------------------------------

def joint_decode(vlm: VLOModel, views, prompts, max_new: int, eos_id: int, pad_id: int = 0):
    """Greedy decoding through the full forward pass with the occupancy stream on.

    Used to show that switching the occupancy branch off changes nothing on
    the text side.
    """
    with T.no_grad():

        def logits_fn(batch: TokenBatch) -> np.ndarray:
            full = TokenBatch(views, batch.text_ids, batch.lengths, batch.prefix_len)
            return vlm.forward(full, skip_occ=False)["text_logits"].data

        return greedy_loop(logits_fn, prompts, max_new, eos_id, vlm.cfg.max_text_len, pad_id)


def _decoder(skip_occ: bool):
    return None if skip_occ else joint_decode


# -- meta ---------------------------------------------------------------------

def meta_scores(gt, pred) -> dict:
    gt, pred = list(gt), list(pred)
    if len(gt) != len(pred) or not gt:
        raise ContractError("meta scoring needs equally many (and some) predictions and labels")
    v = float(np.mean([g[0] == p[0] for g, p in zip(gt, pred)]))
    d = float(np.mean([g[1] == p[1] for g, p in zip(gt, pred)]))
    joint = float(np.mean([tuple(g) == tuple(p) for g, p in zip(gt, pred)]))
    return {"velocity": v, "direction": d, "average": (v + d) / 2, "overall": joint}


def eval_meta(bundle: ModelBundle, episodes, skip_occ: bool = True) -> Report:
    tok = Tokenizer(bundle.vlm.cfg.vocab_size)
    metas, _, ok = predict_meta(bundle.vlm, tok, episodes, decode_fn=_decoder(skip_occ))
    s = meta_scores([ep.meta for ep in episodes], metas)
    rep = Report("meta-action accuracy", ["metric", "value"])
    rep.rows = [["velocity", s["velocity"]], ["direction", s["direction"]], ["average", s["average"]],
                ["overall", s["overall"]], ["parsed", float(np.mean(ok))], ["episodes", len(episodes)]]
    rep.summary = dict(s, parsed=float(np.mean(ok)), predictions=[str(m) for m in metas])
    return rep


# -- QA -----------------------------------------------------------------------

def qa_items(episodes):
    for i, ep in enumerate(episodes):
        for item in ep.texts["qa"]:
            yield i, item


def qa_report(items, answers) -> Report:
    """Exact-match accuracy per (category, hop) plus overall."""
    hits: dict[tuple[str, str], list[bool]] = {}
    for (_, item), ans in zip(items, answers):
        hits.setdefault((item["category"], item["hop"]), []).append(ans.strip() == item["answer"])
    rep = Report("question answering exact match", ["category", "hop", "accuracy", "n"])
    for key in sorted(hits):
        rep.rows.append([key[0], key[1], float(np.mean(hits[key])), len(hits[key])])
    every = [h for v in hits.values() for h in v]
    overall = float(np.mean(every)) if every else float("nan")
    rep.rows.append(["overall", "all", overall, len(every)])
    rep.summary = {"overall": overall}
    return rep


def answer_questions(vlm: VLOModel, tok: Tokenizer, episodes, skip_occ: bool = True, chunk: int = 256,
                     max_new: int = 6) -> list[str]:
    items = list(qa_items(episodes))
    views_all = np.stack([ep.views for ep in episodes])
    decode = _decoder(skip_occ)
    answers = []
    for s in range(0, len(items), chunk):
        part = items[s : s + chunk]
        views = views_to_input(views_all[[i for i, _ in part]])
        prompts = [encode_prompt(tok, qa_prompt(item["question"])) for _, item in part]
        if decode is None:
            gen = vlm.greedy_generate(views, prompts, max_new, tok.eos_id, tok.pad_id)
        else:
            gen = decode(vlm, views, prompts, max_new, tok.eos_id, tok.pad_id)
        answers += [tok.decode(g) for g in gen]
    return answers


def eval_qa(bundle: ModelBundle, episodes, skip_occ: bool = True) -> Report:
    tok = Tokenizer(bundle.vlm.cfg.vocab_size)
    answers = answer_questions(bundle.vlm, tok, episodes, skip_occ)
    return qa_report(list(qa_items(episodes)), answers)


# -- occupancy ------------------------------------------------------------------

def predict_grids(bundle: ModelBundle, episodes, chunk: int = 32):
    if bundle.proj is None or bundle.codec is None:
        raise ContractError("occupancy evaluation needs the projector and codec")
    with T.no_grad():
        for s in range(0, len(episodes), chunk):
            part = episodes[s : s + chunk]
            views = views_to_input(np.stack([ep.views for ep in part]))
            logits = bundle.codec.decode(bundle.proj(bundle.vlm.forward_occ(views))).data
            yield part, np.argmax(logits, axis=-1)


def eval_occ(bundle: ModelBundle, episodes, ignore_empty: bool = True) -> Report:
    cm = ConfusionMatrix(bundle.codec.cfg.num_classes)
    for part, pred in predict_grids(bundle, episodes):
        cm.update(pred, np.stack([ep.grid for ep in part]))
    table = cm.iou_table()
    rep = Report("occupancy IoU", ["class", "iou"])
    for c, v in table.items():
        rep.rows.append([CLASS_NAMES[c], v])
    m = cm.miou(ignore_empty)
    rep.rows.append(["miou" + (" (non-empty)" if ignore_empty else ""), m])
    rep.rows.append(["voxel accuracy", cm.accuracy()])
    rep.summary = {"miou": m, "miou_all": cm.miou(False), "miou_non_empty": cm.miou(True), "accuracy": cm.accuracy()}
    return rep


# -- planning -------------------------------------------------------------------

def plan_report(pred, gt, method: str = "model") -> Report:
    l1, l2, l3, avg = l2_at_horizons(pred, gt)
    rep = Report("planning L2 (m)", ["method", "1s", "2s", "3s", "avg"])
    rep.rows.append([method, l1, l2, l3, avg])
    rep.summary = {"l2": (l1, l2, l3, avg)}
    return rep


def eval_plan(bundle: ModelBundle, episodes, use_ego_history: bool = True, skip_occ: bool = True,
              teacher_force: bool = False) -> Report:
    if bundle.planner is None:
        raise ContractError("planning evaluation needs a stage-3 checkpoint")
    tok = Tokenizer(bundle.vlm.cfg.vocab_size)
    inp = planner_inputs(bundle.vlm, tok, episodes, use_ego_history, teacher_force, _decoder(skip_occ))
    with T.no_grad():
        pred = bundle.planner.plan(inp).data
    method = "model" if use_ego_history else "model (no ego history)"
    rep = plan_report(pred, plan_targets(episodes), method)
    rep.summary["pred"] = pred
    return rep


def evaluate(bundle: ModelBundle, episodes, suite: str, skip_occ: bool = True, use_ego_history: bool = True,
             ignore_empty: bool = True) -> Report:
    if suite not in SUITES:
        raise ContractError(f"unknown suite {suite!r}; choose from {SUITES}")
    if bundle.vlm is None:
        raise ContractError("checkpoint has no model weights")
    if suite == "plan":
        return eval_plan(bundle, episodes, use_ego_history, skip_occ)
    if suite == "qa":
        return eval_qa(bundle, episodes, skip_occ)
    if suite == "occ":
        return eval_occ(bundle, episodes, ignore_empty)
    return eval_meta(bundle, episodes, skip_occ)
