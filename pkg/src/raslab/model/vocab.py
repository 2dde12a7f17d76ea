"""Word-level tokenizer and vocabulary."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
SPECIALS = (PAD, BOS, EOS, UNK)

_PUNCT = "().,:?"
_SPLIT_RE = re.compile(r"([().,:?])")


class EmptyCorpus(Exception):
    pass


def tokenize(text: str) -> list[str]:
    """Split on whitespace, with ().,:? separated into their own tokens."""
    return _SPLIT_RE.sub(r" \1 ", text).split()


def detokenize(tokens: Sequence[str]) -> str:
    """Inverse of tokenize for texts in the corpus format family:
    no space after "(", none before ")", ".", ",", ":", "?"."""
    text = " ".join(tokens)
    text = text.replace("( ", "(")
    for mark in ").,:?":
        text = text.replace(f" {mark}", mark)
    return text


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    token_to_id: dict[str, int] = field(compare=False, repr=False, default_factory=dict)

    def __post_init__(self):
        if self.tokens[:4] != SPECIALS:
            raise ValueError("vocab must start with the four special tokens")
        if not self.token_to_id:
            object.__setattr__(
                self, "token_to_id", {tok: i for i, tok in enumerate(self.tokens)}
            )

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        get = self.token_to_id.get
        return [get(tok, UNK_ID) for tok in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return detokenize([self.tokens[i] for i in ids if i >= UNK_ID])


def build_vocab(texts: Iterable[str], cap: int = 512) -> Vocab:
    """Frequency-then-lexicographic vocabulary over word-level tokens.

    Deterministic for a given corpus; truncated to ``cap`` tokens including
    the specials.
    """
    counts: Counter[str] = Counter()
    for text in texts:
        counts.update(tokenize(text))
    if not counts:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    kept = [token for token, _ in ranked[: max(0, cap - len(SPECIALS))]]
    return Vocab(tokens=SPECIALS + tuple(kept))
