"""
Word-level tokenizer for template reports.

Text is lowercased and split into words and single punctuation marks; every
sequence starts with <sos> and ends with <eos>. Unknown words map to <unk>.
"""

import re
import logging
from pathlib import Path
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from common.errors import InvalidInputError
from common.io_utils import load_json, save_json

logger = logging.getLogger(__name__)

PAD, SOS, EOS, UNK = "<pad>", "<sos>", "<eos>", "<unk>"
SPECIALS = (PAD, SOS, EOS, UNK)
PAD_ID, SOS_ID, EOS_ID, UNK_ID = range(4)

_TOKEN = re.compile(r"\w+|[^\w\s]")
_SPACE_BEFORE_PUNCT = re.compile(r"\s+([^\w\s])")


def split_words(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def normalize_text(text: str) -> str:
    """Case and spacing normalization that ``detokenize`` produces."""
    return _SPACE_BEFORE_PUNCT.sub(r"\1", " ".join(split_words(text)))


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIALS:
            raise InvalidInputError(f"Vocabulary must start with {SPECIALS}")
        if len(set(self.tokens)) != len(self.tokens):
            raise InvalidInputError("Vocabulary has duplicate tokens")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def build(cls, corpus: Iterable[str]) -> "Vocabulary":
        words = sorted({w for text in corpus for w in split_words(text)} - set(SPECIALS))
        return cls(SPECIALS + tuple(words))

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def token_of(self, token_id: int) -> str:
        return self.tokens[token_id]

    def save(self, path: Path) -> None:
        save_json(path, {"tokens": list(self.tokens)})

    @classmethod
    def load(cls, path: Path) -> "Vocabulary":
        return cls(tuple(load_json(path)["tokens"]))


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.ids)

    def validate(self, vocab_size: int) -> None:
        ids = self.ids
        if not ids or ids[0] != SOS_ID:
            raise InvalidInputError("Token sequence must start with <sos>")
        if any(i < 0 or i >= vocab_size for i in ids):
            raise InvalidInputError("Token id outside the vocabulary")
        if SOS_ID in ids[1:]:
            raise InvalidInputError("<sos> only allowed at position 0")
        if EOS_ID in ids and ids.index(EOS_ID) != len(ids) - 1:
            raise InvalidInputError("Tokens after <eos>")


def tokenize(text: str, vocab: Vocabulary) -> TokenSequence:
    return TokenSequence((SOS_ID,) + tuple(vocab.id_of(w) for w in split_words(text)) + (EOS_ID,))


def detokenize(seq, vocab: Vocabulary) -> str:
    ids = seq.ids if isinstance(seq, TokenSequence) else tuple(int(i) for i in seq)
    words = []
    for i in ids:
        if i == EOS_ID:
            break
        if i in (PAD_ID, SOS_ID):
            continue
        words.append(vocab.token_of(i))
    return _SPACE_BEFORE_PUNCT.sub(r"\1", " ".join(words))


def pad_batch(seqs: Sequence[TokenSequence], length: int = 0) -> np.ndarray:
    """Right-pad id sequences with <pad> into an int64 matrix."""
    length = max([length] + [len(s) for s in seqs])
    out = np.full((len(seqs), length), PAD_ID, dtype=np.int64)
    for row, s in enumerate(seqs):
        out[row, : len(s)] = s.ids
    return out
