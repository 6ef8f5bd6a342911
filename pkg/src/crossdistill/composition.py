"""Teacher and composed-student embedding pipelines.

Student path, per text::

    multilingual tokens -> frozen multilingual encoder -> projection (per position)
    -> mask out [BOS]/[EOS] -> prepend "[CLS] <kind> :" rows, append "[SEP]" row
    (rows taken from the retrieval head's own embedding table)
    -> retrieval head + LoRA, fed through the input-embedding bypass
    -> masked mean pool  ==> student sentence embedding

Teacher path: teacher tokens -> teacher encoder -> masked mean pool.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .encoder import LoraAdapters, TransformerEncoder, freeze
from .tensor import ContractError, Tensor
from .tokenization import (BOS, CLS, EOS, SEP, TokenSequence, Vocabulary, pad_batch,
                           tokenize_multilingual, tokenize_teacher)

NUM_PREFIX = 3  # [CLS] <kind> :
NUM_SUFFIX = 1  # [SEP]
NUM_AFFIX = NUM_PREFIX + NUM_SUFFIX


class TeacherModel:
    """Monolingual retrieval encoder plus its tokenizer."""

    def __init__(self, encoder: TransformerEncoder, vocab: Vocabulary):
        self.encoder = encoder
        self.vocab = vocab

    @property
    def max_len(self) -> int:
        return self.encoder.config.max_positions

    def named_tensors(self) -> dict:
        return self.encoder.named_tensors()

    def tokenize(self, texts: Sequence[str], kind: str):
        return pad_batch([tokenize_teacher(self.vocab, t, kind, self.max_len) for t in texts])

    def embed(self, texts: Sequence[str], kind: str, training: bool = False,
              dropout_key: Optional[tuple] = None) -> Tensor:
        """Pooled embeddings ``[B, d]``."""
        ids, mask = self.tokenize(texts, kind)
        h = self.encoder.forward(ids, mask, training=training, dropout_key=dropout_key)
        return T.masked_mean_pool(h, mask)


def teacher_embed(teacher: TeacherModel, text: str, kind: str) -> np.ndarray:
    return teacher.embed([text], kind).data[0]


class Projection:
    """Position-wise ``down(act(up(h)))``; ``act`` is GELU when ``nonlinear`` else identity."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, nonlinear: bool = False,
                 seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 41]))
        self.nonlinear = nonlinear
        self.params = {
            "up.weight": Tensor(rng.normal(0, 1 / math.sqrt(d_in), (d_in, d_hidden)).astype(dtype), True),
            "up.bias": Tensor(np.zeros(d_hidden, dtype=dtype), True),
            "down.weight": Tensor(rng.normal(0, 1 / math.sqrt(d_hidden), (d_hidden, d_out)).astype(dtype), True),
            "down.bias": Tensor(np.zeros(d_out, dtype=dtype), True),
        }

    def named_tensors(self) -> dict:
        return self.params

    def __call__(self, h: Tensor) -> Tensor:
        return project(h, self)


def project(h: Tensor, params: Projection) -> Tensor:
    p = params.params
    if h.shape[-1] != p["up.weight"].shape[0]:
        raise T.DimensionError(f"project: input width {h.shape[-1]} != {p['up.weight'].shape[0]}")
    z = T.add(T.matmul(h, p["up.weight"]), p["up.bias"])
    if params.nonlinear:
        z = T.gelu(z)
    return T.add(T.matmul(z, p["down.weight"]), p["down.bias"])


def edit_mask(seq: TokenSequence, vocab: Vocabulary) -> tuple:
    """Zero the mask at the leading [BOS] and the final [EOS]; keep everything else."""
    if len(seq) < 2 or seq.ids[0] != vocab.id(BOS) or seq.ids[-1] != vocab.id(EOS):
        raise ContractError("sequence must start with [BOS] and end with [EOS]")
    mask = list(seq.attention_mask)
    mask[0] = 0
    mask[-1] = 0
    return tuple(mask)


@dataclass
class AffixEmbeddings:
    """Token ids (in the retrieval head's vocabulary) of the injected rows."""

    query_prefix: tuple
    passage_prefix: tuple
    suffix: tuple

    @classmethod
    def from_vocab(cls, vocab: Vocabulary) -> "AffixEmbeddings":
        ids = [vocab.id(t) for t in (CLS, "query", ":", "passage", SEP)]
        if ids[1] == ids[3] or vocab.id("query") == vocab.id("[UNK]"):
            raise ContractError("retrieval head vocabulary lacks the prefix tokens")
        return cls((ids[0], ids[1], ids[2]), (ids[0], ids[3], ids[2]), (ids[4],))

    def prefix(self, kind: str) -> tuple:
        return self.query_prefix if kind == "query" else self.passage_prefix


@dataclass
class MultilingualBatch:
    """Frozen multilingual encoder output for a batch, with per-row token sequences."""

    hidden: np.ndarray  # [B, Lm, d_enc]
    seqs: list


class ComposedStudent:
    """Frozen multilingual encoder -> projection -> LoRA-adapted retrieval head."""

    def __init__(self, multilingual: TransformerEncoder, ml_vocab: Vocabulary,
                 head: TransformerEncoder, head_vocab: Vocabulary, projection: Projection,
                 lora: LoraAdapters):
        self.multilingual = freeze(multilingual)
        self.ml_vocab = ml_vocab
        self.head = freeze(head)
        self.head_vocab = head_vocab
        self.projection = projection
        self.lora = lora
        self.affixes = AffixEmbeddings.from_vocab(head_vocab)

    @classmethod
    def assemble(cls, multilingual: TransformerEncoder, ml_vocab: Vocabulary, teacher: TeacherModel,
                 lora: LoraAdapters, d_hidden: int = 256, nonlinear: bool = False,
                 seed: int = 0) -> "ComposedStudent":
        """Retrieval head starts as a frozen copy of the teacher encoder."""
        head = teacher.encoder.copy()
        proj = Projection(multilingual.config.d_model, d_hidden, head.config.d_model,
                          nonlinear, seed, head.dtype)
        return cls(multilingual.copy(), ml_vocab, head, teacher.vocab, proj, lora)

    def named_tensors(self) -> dict:
        out = {}
        for prefix, part in (("multilingual", self.multilingual), ("head", self.head),
                             ("projection", self.projection), ("lora", self.lora)):
            out.update({f"{prefix}.{n}": t for n, t in part.named_tensors().items()})
        return out

    @property
    def multilingual_budget(self) -> int:
        """Longest multilingual token sequence that still fits in the retrieval head."""
        return min(self.head.config.max_positions - NUM_AFFIX, self.multilingual.config.max_positions)

    def tokenize(self, text: str, lang_id: int) -> TokenSequence:
        return tokenize_multilingual(self.ml_vocab, text, lang_id, self.multilingual_budget)

    def encode_multilingual(self, texts: Sequence[str], lang_ids) -> MultilingualBatch:
        if isinstance(lang_ids, int):
            lang_ids = [lang_ids] * len(texts)
        seqs = [self.tokenize(t, k) for t, k in zip(texts, lang_ids)]
        ids, mask = pad_batch(seqs)
        h = self.multilingual.forward(ids, mask)
        return MultilingualBatch(h.data, seqs)

    def layout(self, seqs: Sequence[TokenSequence], kind: str):
        """Source-to-target gather index and head attention mask for ``[prefix | proj | suffix]``."""
        B = len(seqs)
        Lm = max(len(s) for s in seqs)
        L = Lm + NUM_AFFIX
        if L > self.head.config.max_positions:
            raise ContractError(f"student sequence length {L} exceeds head max_positions "
                                f"{self.head.config.max_positions}")
        index = np.zeros((B, L), dtype=np.int64)
        mask = np.zeros((B, L), dtype=np.int64)
        for b, seq in enumerate(seqs):
            n = len(seq)
            index[b, :NUM_PREFIX] = np.arange(NUM_PREFIX)
            index[b, NUM_PREFIX:NUM_PREFIX + n] = NUM_PREFIX + np.arange(n)
            index[b, NUM_PREFIX + n] = NUM_PREFIX + Lm  # suffix row
            index[b, NUM_PREFIX + n + 1:] = NUM_PREFIX + np.arange(n, Lm)  # padding rows
            mask[b, :NUM_PREFIX] = 1
            mask[b, NUM_PREFIX:NUM_PREFIX + n] = edit_mask(seq, self.ml_vocab)
            mask[b, NUM_PREFIX + n] = 1
        return index, mask

    def head_inputs(self, batch: MultilingualBatch, kind: str):
        """Projected + affixed input embeddings ``[B, L, d]`` and their mask."""
        B = len(batch.seqs)
        proj = project(Tensor(batch.hidden), self.projection)
        prefix = self.head.token_rows(np.tile(self.affixes.prefix(kind), (B, 1)))
        suffix = self.head.token_rows(np.tile(self.affixes.suffix, (B, 1)))
        source = T.concat([prefix, proj, suffix], axis=1)
        index, mask = self.layout(batch.seqs, kind)
        return T.gather_positions(source, index), mask

    def embed_hidden(self, batch: MultilingualBatch, kind: str, training: bool = False,
                     dropout_key: Optional[tuple] = None, use_lora: bool = True) -> Tensor:
        x, mask = self.head_inputs(batch, kind)
        h = self.head.forward(input_embeddings=x, attention_mask=mask,
                              lora=self.lora if use_lora else None,
                              training=training, dropout_key=dropout_key)
        return T.masked_mean_pool(h, mask)

    def embed(self, texts: Sequence[str], lang_ids, kind: str, **kwargs) -> Tensor:
        return self.embed_hidden(self.encode_multilingual(texts, lang_ids), kind, **kwargs)


def student_embed(student: ComposedStudent, text: str, lang_id: int, kind: str) -> np.ndarray:
    return student.embed([text], lang_id, kind).data[0]
