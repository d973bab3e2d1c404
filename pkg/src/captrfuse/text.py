"""Shared vocabulary, whitespace tokenization and sentence-pair layout."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PAD, CLS, SEP, UNK = "[PAD]", "[CLS]", "[SEP]", "[UNK]"
SPECIAL_TOKENS = (PAD, CLS, SEP, UNK)

_WORD_RE = re.compile(r"\w+|[^\w\s]")


class Vocabulary:
    """Bijective token <-> id map with the four reserved ids first.

    ``[PAD]`` is always id 0, followed by ``[CLS]``, ``[SEP]`` and ``[UNK]``.
    """

    def __init__(self, tokens=()):
        self._itos = list(SPECIAL_TOKENS)
        self._stoi = {t: i for i, t in enumerate(self._itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token):
        if token not in self._stoi:
            self._stoi[token] = len(self._itos)
            self._itos.append(token)
        return self._stoi[token]

    def __len__(self):
        return len(self._itos)

    def __contains__(self, token):
        return token in self._stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self._itos == other._itos

    def __iter__(self):
        return iter(self._itos)

    @property
    def tokens(self):
        return list(self._itos)

    @property
    def pad_id(self):
        return 0

    @property
    def cls_id(self):
        return 1

    @property
    def sep_id(self):
        return 2

    @property
    def unk_id(self):
        return 3

    def id(self, token):
        return self._stoi.get(token, self.unk_id)

    def token(self, idx):
        if not 0 <= idx < len(self._itos):
            raise IndexError(f"token id {idx} outside vocabulary of size {len(self)}")
        return self._itos[idx]

    @classmethod
    def from_texts(cls, texts):
        vocab = cls()
        for text in texts:
            for word in split_words(text):
                vocab.add(word)
        return vocab

    def save(self, path):
        Path(path).write_text("\n".join(self._itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:4]) != SPECIAL_TOKENS:
            raise ValueError(f"vocabulary file must start with {SPECIAL_TOKENS}, got {lines[:4]}")
        if len(set(lines)) != len(lines):
            raise ValueError("vocabulary file contains duplicate tokens")
        return cls(lines[4:])


def split_words(text):
    return _WORD_RE.findall(text.lower())


def tokenize(text, vocab):
    """Lowercase, split on whitespace and punctuation; unknown words map to [UNK]."""
    return [vocab.id(w) for w in split_words(text)]


def detokenize(ids, vocab):
    """Space-join tokens, dropping [PAD]. Other special tokens are kept literally."""
    return " ".join(vocab.token(int(i)) for i in ids if int(i) != vocab.pad_id)


def build_aux_sentence(target, caption):
    """Target tokens immediately followed by caption tokens."""
    target = list(target)
    if not target:
        raise ValueError("auxiliary sentence needs a non-empty target")
    return target + list(caption)


@dataclass(frozen=True)
class SentencePairEncoding:
    ids: np.ndarray
    segments: np.ndarray
    mask: np.ndarray

    def __len__(self):
        return len(self.ids)


def build_sentence_pair(a, b, length, vocab=None):
    """Lay out ``[CLS] a [SEP] b [SEP] [PAD]...`` in exactly ``length`` slots.

    When the pair does not fit, ``b`` is cut from its tail first and ``a``
    only once ``b`` is empty.
    """
    if length < 4:
        raise ValueError(f"sentence-pair length must be at least 4, got {length}")
    cls_id, sep_id, pad_id = (1, 2, 0) if vocab is None else (vocab.cls_id, vocab.sep_id, vocab.pad_id)
    a, b = list(a), list(b)
    budget = length - 3
    overflow = len(a) + len(b) - budget
    if overflow > 0:
        cut = min(overflow, len(b))
        b = b[: len(b) - cut]
        overflow -= cut
        if overflow > 0:
            a = a[: len(a) - overflow]
    ids = [cls_id] + a + [sep_id] + b + [sep_id]
    segments = [0] * (len(a) + 2) + [1] * (len(b) + 1)
    n_real = len(ids)
    ids += [pad_id] * (length - n_real)
    segments += [0] * (length - n_real)
    mask = [1] * n_real + [0] * (length - n_real)
    return SentencePairEncoding(
        np.array(ids, dtype=np.int64),
        np.array(segments, dtype=np.int64),
        np.array(mask, dtype=np.int64),
    )
