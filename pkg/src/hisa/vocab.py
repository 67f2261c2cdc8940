"""Tokenisation and the token/id vocabulary."""

from __future__ import annotations

import re
from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

from .errors import VocabularyError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
TOKENIZER_MODES = ("word", "char")

# CJK ideographs, kana, CJK punctuation and full-width forms are segmented per character.
_CJK = re.compile(
    "[　-〿぀-ヿ㐀-䶿一-鿿豈-﫿＀-￯]"
)


def tokenize(text: str, mode: str = "word") -> list[str]:
    """Lower-case and segment ``text``.

    ``word`` mode splits on whitespace and breaks runs of CJK characters into
    single characters (text without spaces falls back to character tokens).
    ``char`` mode emits every non-space character.
    """
    if mode not in TOKENIZER_MODES:
        raise ValueError(f"unknown tokenizer mode {mode!r}")
    text = text.lower()
    if mode == "char":
        return [c for c in text if not c.isspace()]
    tokens: list[str] = []
    for chunk in text.split():
        start = 0
        for i, ch in enumerate(chunk):
            if _CJK.match(ch):
                if start < i:
                    tokens.append(chunk[start:i])
                tokens.append(ch)
                start = i + 1
        if start < len(chunk):
            tokens.append(chunk[start:])
    return tokens


class Vocabulary:
    """Bijection between tokens and ids with reserved ids PAD=0, BOS=1, EOS=2, UNK=3."""

    def __init__(self, tokens: Sequence[str], mode: str = "word"):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise VocabularyError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.mode = mode
        self._ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens and self.mode == other.mode

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self._ids.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise VocabularyError(f"id {i} outside vocabulary of size {len(self.tokens)}")
            out.append(self.tokens[i])
        return out

    def save(self, path: str | Path) -> None:
        header = "\t".join(
            ["#vocab", f"mode={self.mode}", f"size={len(self)}", f"pad={PAD}", f"bos={BOS}", f"eos={EOS}", f"unk={UNK}"]
        )
        lines = [header] + [f"{t}\t{i}" for i, t in enumerate(self.tokens)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("#vocab"):
            raise VocabularyError(f"{path}: missing vocabulary header")
        meta = dict(f.split("=", 1) for f in lines[0].split("\t")[1:])
        tokens: list[str] = []
        for n, line in enumerate(lines[1:], start=2):
            token, _, idx = line.rpartition("\t")
            if int(idx) != len(tokens):
                raise VocabularyError(f"{path}:{n}: ids must be contiguous, got {idx}")
            tokens.append(token)
        if int(meta.get("size", len(tokens))) != len(tokens):
            raise VocabularyError(f"{path}: header size {meta['size']} != {len(tokens)} entries")
        return cls(tokens, mode=meta.get("mode", "word"))


def build_vocabulary(
    corpus: Iterable[Sequence[str]],
    max_size: int = 50000,
    min_freq: int = 1,
    mode: str = "word",
) -> Vocabulary:
    """Reserved tokens followed by tokens ranked by frequency, ties lexicographic."""
    if max_size <= len(RESERVED):
        raise ValueError(f"max_size must exceed {len(RESERVED)}")
    counts = Counter()
    for tokens in corpus:
        counts.update(t for t in tokens if t not in RESERVED)
    ranked = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + ranked[: max_size - len(RESERVED)], mode=mode)
