"""Staged training: codec pretraining, text pretraining, joint occupancy-language
training and planner fitting.

Every stage reads a JSON :class:`TrainConfig`, writes a per-step CSV log and a
final checkpoint.  Batches for step ``s`` are drawn from the RNG stream
``Rng(seed).child("stage{n}").child(s)``, so a resumed run replays exactly the
batches an uninterrupted run would have seen.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .annotate import ALL_META, MetaAction, parse_meta
from .backbone import ModelConfig, TokenBatch, VLOModel, views_to_input
from .codec import Codec, CodecConfig, Projector, class_weights, codec_loss
from .corpus import TextCorpus, encode_prompt
from .dataset import read_dataset, read_manifest
from .errors import ContractError, ParseError, TrainingError
from .optim import AdamW
from .planner import Planner, PlanInput, l2_at_horizons, plan_input_from_episodes, plan_targets
from .rng import Rng
from .tensor import Tensor
from .tokenizer import Tokenizer

FALLBACK_META = MetaAction("MaintainSpeed", "GoStraight")
DECODER_PREFIX = "codec.decoder."
STAGE2_PREFIXES = (".adapter_", "vlm.occ_queries", "proj.", "codec.head.")


@dataclass
class TrainConfig:
    stage: int
    dataset: str = ""
    ckpt_out: str = ""
    ckpt_in: list = field(default_factory=list)
    log: str | None = None
    lambda_occ: float = 1.0
    lr: float = 3e-4
    betas: list = field(default_factory=lambda: [0.9, 0.95])
    weight_decay: float = 0.01
    group_lr: dict | None = None
    warmup_steps: int = 0
    lr_schedule: str = "constant"
    batch_size: int = 8
    steps: int = 100
    seed: int = 0
    eval_count: int = 200
    train_limit: int | None = None
    skip_occ: bool = False
    use_ego_history: bool = True
    teacher_force_meta: bool = False
    ignore_empty_miou: bool = True
    class_weighted: bool | None = None
    decoder_lr_zero: bool = True
    codec_restart_every: int = 100
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.group_lr is None:
            self.group_lr = {DECODER_PREFIX: 0.0} if self.stage == 2 and self.decoder_lr_zero else {}
        if self.class_weighted is None:
            self.class_weighted = self.stage == 2
        self.validate()

    def validate(self) -> None:
        if self.stage not in (0, 1, 2, 3):
            raise ContractError(f"stage must be 0, 1, 2 or 3, got {self.stage}")
        if not (self.lambda_occ >= 0 and math.isfinite(self.lambda_occ)):
            raise ContractError(f"lambda_occ must be a finite value >= 0, got {self.lambda_occ}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ContractError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ContractError("steps must be >= 0 and batch_size >= 1")
        if self.stage == 2 and self.decoder_lr_zero and self.group_lr.get(DECODER_PREFIX) != 0.0:
            raise ContractError(
                "stage-2 configs need group_lr {'codec.decoder.': 0.0} unless decoder_lr_zero is false"
            )
        ModelConfig(**self.model)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ContractError(f"unknown config keys: {unknown}")
        if "stage" not in raw:
            raise ContractError("config needs a 'stage' key")
        return cls(**raw)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.model)

    @property
    def log_path(self) -> Path:
        return Path(self.log) if self.log else Path(str(self.ckpt_out) + ".csv")


# -- losses -------------------------------------------------------------------

def joint_loss(text_logits: Tensor, text_targets, voxel_logits: Tensor | None, voxel_targets, lam: float,
               class_weight=None) -> tuple[Tensor, Tensor, Tensor | None]:
    """``L = L_text + lam * L_occ`` evaluated in float64.

    ``L_text`` is the suffix-only next-token cross-entropy; ``L_occ`` the
    per-voxel cross-entropy over the whole grid.  With ``lam == 0`` the
    occupancy term is left out of the graph entirely and ``L`` is ``L_text``.
    """
    if lam < 0:
        raise ContractError(f"lambda must be >= 0, got {lam}")
    l_text = T.astype(T.cross_entropy(text_logits, text_targets), np.float64)
    if voxel_logits is None:
        if lam != 0:
            raise ContractError("a positive lambda needs voxel logits")
        return l_text, l_text, None
    vt = np.asarray(voxel_targets).astype(np.int64)
    if voxel_logits.shape[:-1] != vt.shape:
        raise ContractError(f"voxel logits {voxel_logits.shape} do not match targets {vt.shape}")
    l_occ = T.astype(T.cross_entropy(voxel_logits, vt, weight=class_weight), np.float64)
    if lam == 0:
        return l_text, l_text, l_occ
    return l_text + T.scale(l_occ, float(lam)), l_text, l_occ


# -- state --------------------------------------------------------------------

@dataclass
class ModelBundle:
    vlm: VLOModel | None = None
    proj: Projector | None = None
    codec: Codec | None = None
    planner: Planner | None = None

    def modules(self):
        return [m for m in (self.vlm, self.proj, self.codec, self.planner) if m is not None]

    def params(self) -> dict[str, Tensor]:
        out = {}
        for m in self.modules():
            out.update(m.params)
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params().items()}


def model_tensors(tensors: dict) -> dict:
    return {k: v for k, v in tensors.items() if not k.startswith("optim.")}


def load_bundle(paths, model_cfg: ModelConfig | None = None) -> tuple[ModelBundle, list[dict]]:
    """Assemble every module whose parameters appear in the given checkpoints."""
    merged, headers = {}, []
    for path in paths:
        tensors, header = ckpt.load(path)
        for k, v in model_tensors(tensors).items():
            if k in merged:
                raise ContractError(f"parameter {k} appears in more than one input checkpoint")
            merged[k] = v
        headers.append(header)
    if model_cfg is None:
        found = [h["model_config"] for h in headers if "model_config" in h]
        model_cfg = ModelConfig(**found[0]) if found else ModelConfig()
    bundle = ModelBundle()
    if any(k.startswith("vlm.") for k in merged):
        bundle.vlm = VLOModel(model_cfg)
        bundle.vlm.load_arrays({k: v for k, v in merged.items() if k.startswith("vlm.")})
    if any(k.startswith("proj.") for k in merged):
        bundle.proj = Projector(model_cfg.d_model)
        bundle.proj.load_arrays({k: v for k, v in merged.items() if k.startswith("proj.")})
    if any(k.startswith("codec.") for k in merged):
        bundle.codec = Codec()
        bundle.codec.load_arrays({k: v for k, v in merged.items() if k.startswith("codec.")})
    if any(k.startswith("planner.") for k in merged):
        bundle.planner = Planner(model_cfg.d_model)
        bundle.planner.load_arrays({k: v for k, v in merged.items() if k.startswith("planner.")})
    extra = set(merged) - set(bundle.params())
    if extra:
        raise ContractError(f"checkpoint tensors not used by any module: {sorted(extra)[:5]}")
    return bundle, headers


def save_state(path, cfg: TrainConfig, bundle: ModelBundle, opt: AdamW | None, step: int) -> None:
    tensors = dict(bundle.arrays())
    header = {
        "stage": cfg.stage,
        "step": step,
        "config": cfg.to_dict(),
        "rng": {"entropy": [cfg.seed, f"stage{cfg.stage}"]},
    }
    if bundle.vlm is not None:
        header["model_config"] = bundle.vlm.cfg.to_dict()
    if opt is not None and step > 0:
        tensors.update(opt.state_tensors())
        header["optimizer"] = opt.hyperparameters()
    ckpt.save(path, tensors, header)


# -- logging ------------------------------------------------------------------

class CsvLog:
    def __init__(self, path: Path, columns: list[str], append: bool = False):
        self.path = Path(path)
        self.columns = columns
        self.rows: list[dict] = []
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not (append and self.path.exists()):
            with self.path.open("w", newline="") as f:
                csv.writer(f).writerow(columns)

    def write(self, row: dict) -> None:
        self.rows.append(row)
        with self.path.open("a", newline="") as f:
            csv.writer(f).writerow([_fmt(row.get(c)) for c in self.columns])


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_log(path) -> list[dict]:
    with Path(path).open(newline="") as f:
        return [{k: (float(v) if v not in ("",) else None) for k, v in row.items()} for row in csv.DictReader(f)]


def _check_finite(step: int, **values) -> None:
    for name, v in values.items():
        if v is not None and not math.isfinite(v):
            err = TrainingError(f"non-finite {name} ({v}) at step {step}")
            err.step = step
            raise err


def _grad_norm(params: dict[str, Tensor], prefix: str) -> float:
    total = 0.0
    for k, p in params.items():
        if k.startswith(prefix) and p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(total)


# -- data ---------------------------------------------------------------------

def split_episodes(cfg: TrainConfig):
    """``(train, held_out)``: the last ``eval_count`` episodes are held out."""
    if not cfg.dataset:
        raise ContractError("config has no dataset path")
    manifest = read_manifest(cfg.dataset)
    n = manifest["count"]
    if cfg.eval_count >= n:
        raise ContractError(f"eval_count {cfg.eval_count} leaves no training episodes out of {n}")
    episodes = read_dataset(cfg.dataset)
    train, held = episodes[: n - cfg.eval_count], episodes[n - cfg.eval_count :]
    if cfg.train_limit is not None:
        train = train[: cfg.train_limit]
    return train, held


def _freeze_all_but(params: dict[str, Tensor], trainable: set[str]) -> None:
    for k, p in params.items():
        p.requires_grad = k in trainable
        p.grad = None


def _make_optimizer(cfg: TrainConfig, params: dict[str, Tensor]) -> AdamW:
    return AdamW(params, lr=cfg.lr, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay, group_lr=cfg.group_lr)


def _set_lr(opt: AdamW, cfg: TrainConfig, step: int) -> None:
    f = min(1.0, step / cfg.warmup_steps) if cfg.warmup_steps else 1.0
    if cfg.lr_schedule == "cosine" and step > cfg.warmup_steps:
        span = max(1, cfg.steps - cfg.warmup_steps)
        f = 0.5 * (1.0 + math.cos(math.pi * (step - cfg.warmup_steps) / span))
    opt.lr = cfg.lr * f
    opt.group_lr = {k: v * f for k, v in cfg.group_lr.items()}


def _resume(path, cfg: TrainConfig, bundle: ModelBundle, opt: AdamW) -> int:
    tensors, header = ckpt.load(path)
    if header.get("stage") != cfg.stage:
        raise ContractError(f"cannot resume stage {cfg.stage} from a stage-{header.get('stage')} checkpoint")
    for m in bundle.modules():
        m.load_arrays(tensors)
    step = int(header.get("step", 0))
    if step > 0:
        opt.load_state(header["optimizer"], tensors)
    return step


# -- stages -------------------------------------------------------------------

@dataclass
class StageResult:
    log: list[dict]
    checkpoint: Path
    bundle: ModelBundle
    metrics: dict = field(default_factory=dict)


def run_stage(cfg: TrainConfig, resume=None) -> StageResult:
    cfg.validate()
    if not cfg.ckpt_out:
        raise ContractError("config has no ckpt_out path")
    runner = {0: _stage0, 1: _stage1, 2: _stage2, 3: _stage3}[cfg.stage]
    return runner(cfg, resume)


def _loop(cfg, bundle, opt, step_fn, columns, resume, on_step=None) -> StageResult:
    start = _resume(resume, cfg, bundle, opt) if resume else 0
    log = CsvLog(cfg.log_path, ["step"] + columns, append=bool(resume))
    stream = Rng(cfg.seed).child(f"stage{cfg.stage}")
    for step in range(start + 1, cfg.steps + 1):
        _set_lr(opt, cfg, step)
        opt.zero_grad()
        row = step_fn(stream.child(step), step)
        _check_finite(step, **{k: v for k, v in row.items() if isinstance(v, float)})
        opt.step()
        if on_step is not None:
            on_step(step, row)
        row["step"] = step
        log.write(row)
    save_state(cfg.ckpt_out, cfg, bundle, opt, max(cfg.steps, start))
    return StageResult(log.rows, Path(cfg.ckpt_out), bundle)


def _stage0(cfg: TrainConfig, resume=None) -> StageResult:
    train, _ = split_episodes(cfg)
    grids = np.stack([ep.grid for ep in train])
    codec = Codec(seed=cfg.seed)
    bundle = ModelBundle(codec=codec)
    with T.no_grad():
        z0 = codec.encode(grids[: min(len(grids), 512)]).data
    codec.init_codebook_from(z0, Rng(cfg.seed).child("codebook-init"))
    opt = _make_optimizer(cfg, codec.params)
    weight = class_weights(grids) if cfg.class_weighted else None
    window = np.zeros(codec.cfg.codebook_size, dtype=np.int64)

    def step_fn(rng: Rng, step: int) -> dict:
        idx = np.sort(rng.choice(len(grids), size=min(cfg.batch_size, len(grids)), replace=False))
        total, recon, q, _ = codec_loss(codec, grids[idx], weight)
        T.backward(total)
        window[:] += np.bincount(q.codes.reshape(-1), minlength=window.size)
        return {
            "loss": float(total.item()),
            "recon": float(recon.item()),
            "codebook": float(q.codebook_loss.item()),
            "commitment": float(q.commitment_loss.item()),
            "codes_used": int((window > 0).sum()),
        }

    def on_step(step: int, row: dict) -> None:
        every = cfg.codec_restart_every
        if every and step % every == 0 and step < cfg.steps:
            with T.no_grad():
                idx = np.sort(rng_restart(step).choice(len(grids), size=min(64, len(grids)), replace=False))
                z = codec.encode(grids[idx]).data
            row["restarted"] = codec.restart_dead_codes(z, window, rng_restart(step).child("codes"))
            window[:] = 0

    def rng_restart(step):
        return Rng(cfg.seed).child("restart").child(step)

    res = _loop(cfg, bundle, opt, step_fn, ["loss", "recon", "codebook", "commitment", "codes_used", "restarted"],
                resume, on_step)
    res.metrics["train_accuracy"] = codec_accuracy(codec, grids)
    return res


def codec_accuracy(codec: Codec, grids, chunk: int = 64) -> float:
    hits = 0
    for s in range(0, len(grids), chunk):
        g = grids[s : s + chunk]
        hits += int((codec.reconstruct(g) == g).sum())
    return hits / float(np.asarray(grids).size)


def _text_step(vlm: VLOModel, corpus: TextCorpus, rng: Rng, batch_size: int):
    n = len(corpus)
    idx = np.sort(rng.choice(n, size=min(batch_size, n), replace=False))
    samples = corpus.pick(rng.child("pick"), idx)
    return idx, corpus.batch(samples, idx)


def _stage1(cfg: TrainConfig, resume=None) -> StageResult:
    if cfg.ckpt_in:
        raise ContractError("stage 1 starts from fresh weights and takes no input checkpoint")
    train, _ = split_episodes(cfg)
    mcfg = cfg.model_config
    tok = Tokenizer(mcfg.vocab_size)
    vlm = VLOModel(mcfg, seed=cfg.seed)
    proj = Projector(mcfg.d_model, seed=cfg.seed)
    bundle = ModelBundle(vlm=vlm, proj=proj)
    trainable = {k for k in vlm.params if ".adapter_" not in k and k != "vlm.occ_queries"}
    _freeze_all_but(bundle.params(), trainable)
    opt = _make_optimizer(cfg, {k: vlm.params[k] for k in sorted(trainable)})
    corpus = TextCorpus(tok, train, mcfg.max_text_len)

    def step_fn(rng: Rng, step: int) -> dict:
        _, batch = _text_step(vlm, corpus, rng, cfg.batch_size)
        loss, l_text, _ = joint_loss(vlm.forward_text(batch, skip_occ=True), batch.targets(), None, None, 0.0)
        T.backward(loss)
        return {"loss": float(loss.item()), "l_text": float(l_text.item())}

    return _loop(cfg, bundle, opt, step_fn, ["loss", "l_text"], resume)


def _stage2_inputs(cfg: TrainConfig):
    if len(cfg.ckpt_in) != 2:
        raise ContractError("stage 2 needs two input checkpoints: the stage-0 codec and the stage-1 model")
    stages = sorted(ckpt.load(p)[1].get("stage") for p in cfg.ckpt_in)
    if stages != [0, 1]:
        raise ContractError(f"stage 2 needs stage-0 and stage-1 checkpoints, got stages {stages}")
    bundle, _ = load_bundle(cfg.ckpt_in, cfg.model_config)
    if bundle.vlm is None or bundle.codec is None or bundle.proj is None:
        raise ContractError("stage-2 inputs lack the model, projector or codec")
    return bundle


def stage2_trainable(names, occ_active: bool) -> set[str]:
    """Adapters always; occupancy queries, projector, classification head and
    the (zero-lr) decoder only when the occupancy loss is in the graph."""
    out = set()
    for k in names:
        if ".adapter_" in k:
            out.add(k)
        elif occ_active and (k.startswith(STAGE2_PREFIXES[1:]) or k.startswith(DECODER_PREFIX)):
            out.add(k)
    return out


def _stage2(cfg: TrainConfig, resume=None) -> StageResult:
    bundle = _stage2_inputs(cfg)
    train, _ = split_episodes(cfg)
    vlm, proj, codec = bundle.vlm, bundle.proj, bundle.codec
    tok = Tokenizer(vlm.cfg.vocab_size)
    occ_active = cfg.lambda_occ > 0 and not cfg.skip_occ
    params = bundle.params()
    trainable = stage2_trainable(params, occ_active)
    _freeze_all_but(params, trainable)
    opt = _make_optimizer(cfg, {k: params[k] for k in sorted(trainable)})
    corpus = TextCorpus(tok, train, vlm.cfg.max_text_len)
    grids = np.stack([ep.grid for ep in train])
    weight = class_weights(grids) if cfg.class_weighted else None

    def step_fn(rng: Rng, step: int) -> dict:
        idx, batch = _text_step(vlm, corpus, rng, cfg.batch_size)
        out = vlm.forward(batch, skip_occ=not occ_active)
        voxel_logits = codec.decode(proj(out["occ_hidden"])) if occ_active else None
        loss, l_text, l_occ = joint_loss(out["text_logits"], batch.targets(), voxel_logits, grids[idx],
                                         cfg.lambda_occ if occ_active else 0.0, weight)
        T.backward(loss)
        return {
            "loss": float(loss.item()),
            "l_text": float(l_text.item()),
            "l_occ": None if l_occ is None else float(l_occ.item()),
            "lambda": float(cfg.lambda_occ if occ_active else 0.0),
            "proj_grad_norm": _grad_norm(params, "proj."),
            "decoder_grad_norm": _grad_norm(params, DECODER_PREFIX),
            "adapter_grad_norm": _grad_norm({k: v for k, v in params.items() if ".adapter_" in k}, "vlm."),
        }

    cols = ["loss", "l_text", "l_occ", "lambda", "proj_grad_norm", "decoder_grad_norm", "adapter_grad_norm"]
    return _loop(cfg, bundle, opt, step_fn, cols, resume)


# -- stage 3 ------------------------------------------------------------------

def visual_summary(vlm: VLOModel, views_u8: np.ndarray, chunk: int = 128) -> np.ndarray:
    """Mean-pooled final visual states, ``[N, d_model]``."""
    out = []
    with T.no_grad():
        for s in range(0, len(views_u8), chunk):
            cache = vlm.encode_visual(views_to_input(views_u8[s : s + chunk]))
            out.append(cache.final.data.mean(axis=1))
    return np.concatenate(out).astype(np.float32)


def predict_meta(vlm: VLOModel, tok: Tokenizer, episodes, chunk: int = 128, decode_fn=None):
    """Greedy chain-of-thought decoding per episode.

    Returns ``(metas, texts, parsed_ok)``; unparseable outputs fall back to
    :data:`FALLBACK_META`.
    """
    metas, texts, ok = [], [], []
    for s in range(0, len(episodes), chunk):
        part = episodes[s : s + chunk]
        views = views_to_input(np.stack([ep.views for ep in part]))
        prompts = [encode_prompt(tok, ep.texts["cot_prefix"]) for ep in part]
        max_new = vlm.cfg.max_text_len - max(len(p) for p in prompts)
        if decode_fn is None:
            gen = vlm.greedy_generate(views, prompts, max_new, tok.eos_id, tok.pad_id)
        else:
            gen = decode_fn(vlm, views, prompts, max_new, tok.eos_id, tok.pad_id)
        for g in gen:
            text = tok.decode(g)
            texts.append(text)
            try:
                metas.append(parse_meta(text))
                ok.append(True)
            except ParseError:
                metas.append(FALLBACK_META)
                ok.append(False)
    return metas, texts, ok


def planner_inputs(vlm: VLOModel, tok: Tokenizer, episodes, use_ego_history: bool, teacher_force: bool,
                   decode_fn=None) -> PlanInput:
    if teacher_force:
        metas = [ep.meta for ep in episodes]
    else:
        metas = predict_meta(vlm, tok, episodes, decode_fn=decode_fn)[0]
    summary = visual_summary(vlm, np.stack([ep.views for ep in episodes]))
    return plan_input_from_episodes(episodes, metas, summary, use_ego_history)


def _subset(inp: PlanInput, idx) -> PlanInput:
    return PlanInput([inp.meta[i] for i in idx], inp.prev_velocity[idx], inp.visual_summary[idx], inp.past_traj[idx])


def _stage3(cfg: TrainConfig, resume=None) -> StageResult:
    if len(cfg.ckpt_in) != 1:
        raise ContractError("stage 3 needs exactly one input checkpoint (the stage-2 model)")
    header = ckpt.load(cfg.ckpt_in[0])[1]
    if header.get("stage") != 2:
        raise ContractError(f"stage 3 needs a stage-2 checkpoint, got stage {header.get('stage')}")
    bundle, _ = load_bundle(cfg.ckpt_in, cfg.model_config)
    vlm = bundle.vlm
    tok = Tokenizer(vlm.cfg.vocab_size)
    train, _ = split_episodes(cfg)
    inp = planner_inputs(vlm, tok, train, cfg.use_ego_history, cfg.teacher_force_meta)
    target = plan_targets(train)
    bundle.planner = Planner(vlm.cfg.d_model, seed=cfg.seed)
    params = bundle.params()
    _freeze_all_but(params, set(bundle.planner.params))
    opt = _make_optimizer(cfg, bundle.planner.params)
    planner = bundle.planner

    def step_fn(rng: Rng, step: int) -> dict:
        idx = np.sort(rng.choice(len(train), size=min(cfg.batch_size, len(train)), replace=False))
        pred = planner.plan(_subset(inp, idx))
        loss = T.mse(pred, Tensor(target[idx]))
        T.backward(loss)
        return {"loss": float(loss.item())}

    res = _loop(cfg, bundle, opt, step_fn, ["loss"], resume)
    with T.no_grad():
        full = planner.plan(inp).data
    res.metrics["train_mse"] = float(((full - target) ** 2).mean())
    res.metrics["train_l2"] = l2_at_horizons(full, target)
    return res


__all__ = [
    "ALL_META",
    "FALLBACK_META",
    "ModelBundle",
    "StageResult",
    "TrainConfig",
    "joint_loss",
    "load_bundle",
    "planner_inputs",
    "predict_meta",
    "run_stage",
    "visual_summary",
]
