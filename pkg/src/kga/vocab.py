"""Closed-vocabulary word/punctuation tokenizer."""

from __future__ import annotations

import re
from pathlib import Path
from typing import Iterable

PAD, UNK, BOS, SEP, ANS = "<pad>", "<unk>", "<bos>", "<sep>", "<ans>"
# Reserved ids are fixed: <pad>=0, <unk>=1, <bos>=2, <sep>=3, <ans>=4.
RESERVED = (PAD, UNK, BOS, SEP, ANS)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocab":
        v = cls()
        for text in texts:
            for w in split_words(text):
                v.add(w)
        return v

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def bos_id(self) -> int:
        return 2

    @property
    def sep_id(self) -> int:
        return 3

    @property
    def ans_id(self) -> int:
        return 4

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.itos[i] for i in ids)

    def save(self, path) -> None:
        lines = [f"{tok}\t{i}\n" for i, tok in enumerate(self.itos)]
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        pairs = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            tok, idx = line.rsplit("\t", 1)
            pairs.append((int(idx), tok))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise ValueError(f"{path}: vocabulary ids are not contiguous from 0")
        if tuple(t for _, t in pairs[: len(RESERVED)]) != RESERVED:
            raise ValueError(f"{path}: reserved tokens missing or misplaced")
        v = cls()
        for _, tok in pairs[len(RESERVED):]:
            v.add(tok)
        return v


def tokenize(text: str, vocab: Vocab) -> list[int]:
    """Lowercase, split on whitespace and punctuation, map OOV words to UNK."""
    return [vocab.stoi.get(w, vocab.unk_id) for w in split_words(text)]
