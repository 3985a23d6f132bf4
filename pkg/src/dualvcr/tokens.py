"""Word-level tokenizer and vocabulary."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .document import Task, element_html_text

PAD, UNK, SEP, CLS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<sep>", "<cls>")

# runs of letters/digits, or any other single non-space character
_TOKEN = re.compile(r"[^\W_]+|\S")


def split_words(s: str) -> list[str]:
    return _TOKEN.findall(s.lower())


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    _ids: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError("vocab must start with the reserved tokens")
        ids = {t: i for i, t in enumerate(self.tokens)}
        if len(ids) != len(self.tokens):
            raise ValueError("vocab has duplicate tokens")
        object.__setattr__(self, "_ids", ids)

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self._ids.get(w, UNK) for w in words]

    def to_json(self) -> str:
        return json.dumps(list(self.tokens), ensure_ascii=False)

    @classmethod
    def from_json(cls, s: str) -> "Vocab":
        return cls(tuple(json.loads(s)))


def tokenize(s: str, v: Vocab) -> list[int]:
    return v.encode(split_words(s))


def build_vocab_from_texts(texts: Iterable[str], min_count: int = 1) -> Vocab:
    counts = Counter(w for t in texts for w in split_words(t))
    for r in RESERVED:
        counts.pop(r, None)
    kept = sorted((w for w, n in counts.items() if n >= min_count), key=lambda w: (-counts[w], w))
    return Vocab(RESERVED + tuple(kept))


def corpus_texts(corpus: Sequence[Task]) -> Iterable[str]:
    """Every string the models will read: instructions, element renderings, history."""
    for task in corpus:
        yield task.instruction
        for step in task.steps:
            for e in step.document.elements:
                yield element_html_text(e)
            yield from step.history_text
            op = step.gt_action.operation
            yield str(op)


def build_vocab(corpus: Sequence[Task], min_count: int = 1) -> Vocab:
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    return build_vocab_from_texts(corpus_texts(corpus), min_count)
