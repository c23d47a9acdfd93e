"""Word vocabulary with reserved specials and the shared caption tokenizer."""
from __future__ import annotations

import re
from typing import Iterable

from .decoder import BOS, EOS, PAD, UNK

SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
_WORD = re.compile(r"[a-z0-9]+")


def split_words(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation."""
    return _WORD.findall(text.lower())


class Vocabulary:
    """Bijective word <-> id map; ids 0..3 are pad, bos, eos, unk."""

    def __init__(self, words: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(SPECIALS)}
        for w in words:
            self.add(w)

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        """Vocabulary of every word in ``texts``, sorted for a stable order."""
        words = sorted({w for t in texts for w in split_words(t)})
        return cls(words)

    def add(self, word: str) -> int:
        if word not in self.stoi:
            self.stoi[word] = len(self.itos)
            self.itos.append(word)
        return self.stoi[word]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(w, UNK) for w in split_words(text)]

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            words.append(self.itos[i] if 0 <= i < len(self.itos) else SPECIALS[UNK])
        return " ".join(words)


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return vocab.encode(text)
