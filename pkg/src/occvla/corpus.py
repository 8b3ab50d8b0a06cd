"""Turning episodes into prompt/target token sequences and training batches.

Every sequence is ``<bos> prompt target <eos>``; the prompt (with ``<bos>``)
is the conditioning prefix and only ``target <eos>`` is supervised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import templates as tpl
from .backbone import TokenBatch, views_to_input
from .errors import ContractError
from .rng import Rng
from .tokenizer import Tokenizer

KINDS = ("caption", "qa", "cot")


@dataclass(frozen=True)
class TextSample:
    episode: int
    kind: str
    prompt: tuple[int, ...]
    target: tuple[int, ...]

    def ids(self, eos_id: int) -> list[int]:
        return list(self.prompt) + list(self.target) + [eos_id]


def encode_prompt(tok: Tokenizer, text: str) -> tuple[int, ...]:
    return (tok.bos_id,) + tuple(tok.encode(text))


def qa_prompt(question: str) -> str:
    return tpl.QA_PROMPT.format(question=question)


def episode_samples(tok: Tokenizer, ep, index: int) -> dict[str, list[TextSample]]:
    """All supervised texts of one annotated episode, grouped by kind."""
    if ep.meta is None or "cot" not in ep.texts:
        raise ContractError(f"episode {ep.id} is not annotated")
    out = {
        "caption": [TextSample(index, "caption", encode_prompt(tok, tpl.CAPTION_PROMPT), tuple(tok.encode(ep.texts["caption"])))],
        "qa": [
            TextSample(index, "qa", encode_prompt(tok, qa_prompt(item["question"])), tuple(tok.encode(item["answer"])))
            for item in ep.texts["qa"]
        ],
        "cot": [TextSample(index, "cot", encode_prompt(tok, ep.texts["cot_prefix"]), tuple(tok.encode(ep.texts["cot"])))],
    }
    return out


class TextCorpus:
    """Per-episode text samples plus the batching policy used in training."""

    def __init__(self, tok: Tokenizer, episodes, max_len: int):
        self.tok = tok
        self.episodes = list(episodes)
        self.max_len = max_len
        self.samples = [episode_samples(tok, ep, i) for i, ep in enumerate(self.episodes)]
        longest = max(len(s.ids(tok.eos_id)) for per in self.samples for group in per.values() for s in group)
        if longest > max_len:
            raise ContractError(f"a training sequence has {longest} tokens, above max_text_len {max_len}")
        self.views = np.stack([ep.views for ep in self.episodes])

    def __len__(self) -> int:
        return len(self.episodes)

    def pick(self, rng: Rng, episode_idx, kinds=KINDS) -> list[TextSample]:
        """One sample of each kind per episode (a random QA item for ``qa``)."""
        out = []
        for e in episode_idx:
            per = self.samples[int(e)]
            for kind in kinds:
                group = per[kind]
                out.append(group[int(rng.integers(0, len(group)))] if len(group) > 1 else group[0])
        return out

    def batch(self, samples: list[TextSample], episode_idx) -> TokenBatch:
        """Pad ``samples`` into one batch sharing the views of ``episode_idx``."""
        episode_idx = [int(e) for e in episode_idx]
        slot = {e: i for i, e in enumerate(episode_idx)}
        return collate(self.tok, samples, views_to_input(self.views[episode_idx]),
                       np.array([slot[s.episode] for s in samples]))


def collate(tok: Tokenizer, samples, views: np.ndarray, view_index=None) -> TokenBatch:
    seqs = [s.ids(tok.eos_id) for s in samples]
    width = max(len(q) for q in seqs)
    ids = np.full((len(seqs), width), tok.pad_id, dtype=np.int64)
    for i, q in enumerate(seqs):
        ids[i, : len(q)] = q
    lengths = np.array([len(q) for q in seqs])
    prefix = np.array([len(s.prompt) for s in samples])
    return TokenBatch(views, ids, lengths, prefix, view_index)
