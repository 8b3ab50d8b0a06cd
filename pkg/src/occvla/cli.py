"""Command-line entry point: ``occvla <command> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .errors import ContractError, FormatError


def _episodes_for(args, header: dict):
    from .dataset import read_dataset, read_manifest

    cfg = header.get("config", {})
    directory = args.dataset or cfg.get("dataset")
    if not directory:
        raise ContractError("no dataset given and none recorded in the checkpoint")
    n = read_manifest(directory)["count"]
    eval_count = args.eval_count if args.eval_count is not None else cfg.get("eval_count", 200)
    return read_dataset(directory)[n - eval_count :]


def cmd_gen_data(args) -> int:
    from .dataset import generate_dataset, write_dataset

    eps = generate_dataset(args.seed, args.count, annotate=args.annotate)
    manifest = write_dataset(eps, args.out, {"seed": args.seed, "count": args.count, "annotated": args.annotate})
    print(f"wrote {manifest['count']} episodes to {args.out}")
    return 0


def cmd_annotate(args) -> int:
    from .annotate import annotate_episode
    from .dataset import read_dataset, read_manifest, write_dataset

    manifest = read_manifest(args.dir)
    eps = [annotate_episode(ep) for ep in read_dataset(args.dir)]
    config = dict(manifest.get("config") or {}, annotated=True)
    write_dataset(eps, args.dir, config)
    print(f"annotated {len(eps)} episodes in {args.dir}")
    return 0


def cmd_train(args) -> int:
    from .trainer import TrainConfig, run_stage

    cfg = TrainConfig.from_json(args.config)
    if cfg.stage != args.stage:
        raise ContractError(f"--stage {args.stage} does not match the config's stage {cfg.stage}")
    res = run_stage(cfg, resume=args.resume)
    last = res.log[-1] if res.log else {}
    print(f"stage {cfg.stage}: {len(res.log)} steps, final {json.dumps({k: v for k, v in last.items() if v is not None})}")
    for k, v in res.metrics.items():
        print(f"{k}: {v}")
    print(f"checkpoint: {res.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    from .evaluate import evaluate
    from .trainer import load_bundle

    bundle, headers = load_bundle([args.ckpt])
    episodes = _episodes_for(args, headers[0])
    rep = evaluate(bundle, episodes, args.suite, skip_occ=args.skip_occ, use_ego_history=not args.no_ego_history,
                   ignore_empty=not args.include_empty)
    sys.stdout.write(rep.to_text())
    sys.stdout.write("\n" + rep.to_csv())
    if args.out:
        rep.write(args.out)
    return 0


def cmd_infer(args) -> int:
    from . import occgrid
    from .evaluate import predict_grids
    from .tokenizer import Tokenizer
    from .trainer import load_bundle, predict_meta

    bundle, headers = load_bundle([args.ckpt])
    from .dataset import read_dataset

    directory = args.dataset or headers[0].get("config", {}).get("dataset")
    if not directory:
        raise ContractError("no dataset given and none recorded in the checkpoint")
    eps = [ep for ep in read_dataset(directory) if ep.id == args.episode]
    if not eps:
        raise ContractError(f"episode {args.episode} not found in {directory}")
    tok = Tokenizer(bundle.vlm.cfg.vocab_size)
    metas, texts, ok = predict_meta(bundle.vlm, tok, eps)
    print(texts[0])
    print(f"meta: {metas[0]}" + ("" if ok[0] else " (fallback, output did not parse)"))
    if args.dump_occ:
        _, pred = next(predict_grids(bundle, eps))
        occgrid.save(args.dump_occ, pred[0].astype(np.uint8))
        print(f"occupancy written to {args.dump_occ}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import end_to_end_check, run_op_suite

    failed = False
    for name, errs in sorted(run_op_suite(args.shapes, seed=args.seed).items()):
        worst = max(errs)
        bad = worst >= 1e-4
        failed |= bad
        print(f"{'FAIL' if bad else 'ok  '} {name:24s} max rel err {worst:.2e} over {len(errs)} checks")
    results = end_to_end_check(args.seed)
    worst = max(r.rel_error for r in results)
    bad = worst >= 1e-3
    failed |= bad
    print(f"{'FAIL' if bad else 'ok  '} {'end-to-end':24s} max rel err {worst:.2e} over {len(results)} tensors")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="occvla", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic episode dataset")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--annotate", action="store_true", help="also attach meta actions and reasoning text")
    g.set_defaults(func=cmd_gen_data)

    a = sub.add_parser("annotate", help="label meta actions and reasoning text in place")
    a.add_argument("dir")
    a.set_defaults(func=cmd_annotate)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", type=int, choices=(0, 1, 2, 3), required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    e.add_argument("--suite", choices=("plan", "qa", "occ", "meta"), required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--skip-occ", action="store_true")
    e.add_argument("--no-ego-history", action="store_true")
    e.add_argument("--include-empty", action="store_true", help="count the empty class in mIoU")
    e.add_argument("--dataset")
    e.add_argument("--eval-count", type=int)
    e.add_argument("--out", help="write <out>.txt and <out>.csv")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="run the model on one episode")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--episode", type=int, required=True)
    i.add_argument("--dataset")
    i.add_argument("--dump-occ")
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op and the whole model")
    c.add_argument("--shapes", type=int, default=20)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ContractError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
