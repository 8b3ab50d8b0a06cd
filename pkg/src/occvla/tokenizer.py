"""Word-level tokenizer over the closed template vocabulary."""

from __future__ import annotations

import re

from .templates import TOKEN_RE, vocabulary_words

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)

_NO_SPACE_BEFORE = re.compile(r" ([.,?:!|])")
_NO_SPACE_AFTER = re.compile(r"\| ")


class Tokenizer:
    def __init__(self, vocab_size: int = 512):
        words = sorted(vocabulary_words() - set(SPECIALS))
        self.itos = list(SPECIALS) + words
        if len(self.itos) > vocab_size:
            raise ValueError(f"template vocabulary ({len(self.itos)}) exceeds vocab_size {vocab_size}")
        self.vocab_size = vocab_size
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        self.pad_id = self.stoi[PAD]
        self.bos_id = self.stoi[BOS]
        self.eos_id = self.stoi[EOS]
        self.unk_id = self.stoi[UNK]

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(tok, self.unk_id) for tok in TOKEN_RE.findall(text)]

    def decode(self, ids) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == self.eos_id:
                break
            if i in (self.pad_id, self.bos_id):
                continue
            words.append(self.itos[i] if 0 <= i < len(self.itos) else UNK)
        text = " ".join(words)
        text = _NO_SPACE_BEFORE.sub(r"\1", text)
        return _NO_SPACE_AFTER.sub("|", text)
