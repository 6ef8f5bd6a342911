"""Word-level vocabularies and tokenizers.

Two conventions are supported. The teacher (monolingual retriever) wraps text
as ``[CLS] query : w1 ... wn [SEP]`` (or ``passage``); the multilingual encoder
wraps it as ``[BOS] [LANG_k] w1 ... wn [EOS]``.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import ContractError

PAD, UNK, CLS, SEP, BOS, EOS = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[BOS]", "[EOS]"
TEACHER_RESERVED = (PAD, UNK, CLS, SEP)
KINDS = ("query", "passage")
PREFIX_TOKENS = ("query", "passage", ":")

_SPLIT = re.compile(r"\w+|[^\w\s]")


class IngestionError(ValueError):
    """Input corpus is unusable."""


class ConfigurationError(ValueError):
    """A requested setting is not registered / not valid."""


def lang_tag(lang_id: int) -> str:
    return f"[LANG_{lang_id}]"


def multilingual_reserved(num_languages: int) -> tuple:
    return (PAD, UNK, BOS, EOS) + tuple(lang_tag(k) for k in range(num_languages))


def split_words(text: str) -> list[str]:
    return _SPLIT.findall(text.lower())


class Vocabulary:
    """Ordered token list; a token's id is its position."""

    def __init__(self, tokens: Sequence[str], reserved: Sequence[str]):
        tokens = list(tokens)
        if tokens[: len(reserved)] != list(reserved):
            raise ConfigurationError("reserved tokens must occupy the lowest ids")
        if len(set(tokens)) != len(tokens):
            raise ConfigurationError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.reserved = tuple(reserved)
        self._index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self._index.get(token, self._index[UNK])

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    def encode_words(self, words: Iterable[str]) -> list[int]:
        unk = self._index[UNK]
        return [self._index.get(w, unk) for w in words]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens = Path(path).read_text(encoding="utf-8").split("\n")
        if tokens and tokens[-1] == "":
            tokens.pop()
        reserved = [t for t in tokens if t.startswith("[") and t.endswith("]") and len(t) > 2]
        return cls(tokens, reserved)

    @property
    def language_ids(self) -> list[int]:
        return [int(t[6:-1]) for t in self.reserved if t.startswith("[LANG_")]


def build_vocab(corpus_texts: Iterable[str], min_count: int = 1,
                reserved: Sequence[str] = TEACHER_RESERVED,
                required: Sequence[str] = ()) -> Vocabulary:
    """Collect word types with ``count >= min_count``.

    Ordering: reserved tokens, then ``required`` tokens as given, then corpus
    words by descending count with lexicographic tie-break.
    """
    counts: Counter = Counter()
    n = 0
    for text in corpus_texts:
        n += 1
        counts.update(split_words(text))
    if n == 0:
        raise IngestionError("cannot build a vocabulary from an empty corpus")
    taken = set(reserved)
    tokens = list(reserved)
    for tok in required:
        if tok not in taken:
            tokens.append(tok)
            taken.add(tok)
    ranked = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
    tokens.extend(w for w in ranked if w not in taken)
    return Vocabulary(tokens, reserved)


def build_teacher_vocab(corpus_texts: Iterable[str], min_count: int = 1) -> Vocabulary:
    return build_vocab(corpus_texts, min_count, TEACHER_RESERVED, PREFIX_TOKENS)


def build_multilingual_vocab(corpus_texts: Iterable[str], num_languages: int,
                             min_count: int = 1) -> Vocabulary:
    return build_vocab(corpus_texts, min_count, multilingual_reserved(num_languages))


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple
    attention_mask: tuple

    def __post_init__(self):
        if len(self.ids) != len(self.attention_mask):
            raise ContractError("ids and attention_mask lengths differ")
        if not any(self.attention_mask):
            raise ContractError("attention mask has no active position")

    def __len__(self) -> int:
        return len(self.ids)


def tokenize_teacher(vocab: Vocabulary, text: str, kind: str, max_len: int) -> TokenSequence:
    """``[CLS] <kind> : words [SEP]`` truncated to ``max_len`` (words go first)."""
    if max_len < 3:
        raise ContractError(f"max_len={max_len} leaves no room for [CLS]/[SEP]")
    if kind not in KINDS:
        raise ContractError(f"kind must be one of {KINDS}, got {kind!r}")
    body = [vocab.id(kind), vocab.id(":")] + vocab.encode_words(split_words(text))
    ids = [vocab.id(CLS)] + body[: max_len - 2] + [vocab.id(SEP)]
    return TokenSequence(tuple(ids), (1,) * len(ids))


def tokenize_multilingual(vocab: Vocabulary, text: str, lang_id: int, max_len: int) -> TokenSequence:
    """``[BOS] [LANG_k] words [EOS]`` truncated to ``max_len``; [EOS] always survives."""
    tag = lang_tag(lang_id)
    if tag not in vocab:
        raise ConfigurationError(f"language {lang_id} is not registered in the vocabulary")
    if max_len < 3:
        raise ContractError(f"max_len={max_len} leaves no room for [BOS]/[LANG]/[EOS]")
    words = vocab.encode_words(split_words(text))[: max_len - 3]
    ids = [vocab.id(BOS), vocab.id(tag)] + words + [vocab.id(EOS)]
    return TokenSequence(tuple(ids), (1,) * len(ids))


def pad_batch(seqs: Sequence[TokenSequence], pad_id: int = 0):
    """Right-pad to a common length. Returns ``(ids [B, L], mask [B, L])`` int arrays."""
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s.ids
        mask[i, : len(s)] = s.attention_mask
    return ids, mask
