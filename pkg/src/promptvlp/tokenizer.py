"""Whitespace+punctuation tokenizer with a small learned vocabulary.

Vocabulary file format: one token per line, UTF-8; the line number is the
token id. The four special tokens always occupy ids 0-3 in the order
[PAD], [UNK], [CLS], [MASK]. Unknown words map to [UNK].
"""

from __future__ import annotations

import re
from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

PAD, UNK, CLS, MASK = "[PAD]", "[UNK]", "[CLS]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, MASK)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def word_tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Tokenizer:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            raise ValueError(f"vocabulary must start with {SPECIAL_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def cls_id(self) -> int:
        return self.index[CLS]

    @property
    def mask_id(self) -> int:
        return self.index[MASK]

    @property
    def special_ids(self) -> tuple[int, ...]:
        return tuple(self.index[t] for t in SPECIAL_TOKENS)

    @classmethod
    def build(cls, texts: Iterable[str], max_vocab: int = 4096) -> "Tokenizer":
        """Learn a vocabulary: most frequent first, ties broken alphabetically."""
        counts = Counter()
        for text in texts:
            counts.update(word_tokenize(text))
        budget = max_vocab - len(SPECIAL_TOKENS)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:budget]
        return cls(list(SPECIAL_TOKENS) + [t for t, _ in ranked])

    def encode(self, text: str, max_len: int) -> tuple[list[int], list[int]]:
        """[CLS] + up to max_len word ids, padded; returns (ids, attention_mask)."""
        words = word_tokenize(text)[:max_len]
        ids = [self.cls_id] + [self.index.get(w, self.unk_id) for w in words]
        mask = [1] * len(ids)
        pad = max_len + 1 - len(ids)
        return ids + [self.pad_id] * pad, mask + [0] * pad

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([line for line in lines if line])
