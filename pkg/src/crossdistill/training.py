"""Optimizer, schedules, losses and the three training procedures.

* ``train_teacher``: contrastive (InfoNCE) training of the monolingual retriever.
* ``pretrain_multilingual``: parallel-sentence alignment of the multilingual encoder.
* ``distill``: MSE between teacher and composed-student embeddings, English only.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .composition import ComposedStudent, MultilingualBatch, TeacherModel
from .encoder import TransformerEncoder, trainable_parameters
from .synth import ParallelPair, RetrievalDataset
from .tensor import ContractError, Tape, Tensor
from .tokenization import Vocabulary, pad_batch, tokenize_multilingual

logger = logging.getLogger(__name__)

# dropout stream ids, one per model role
STREAM_TEACHER, STREAM_MULTILINGUAL, STREAM_HEAD = 1, 2, 3


class DivergenceError(RuntimeError):
    pass


class FrozenGradientError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 2e-4
    schedule: str = "linear"
    seed: int = 0
    temperature: float = 0.05
    log_every: int = 50

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.schedule not in ("constant", "linear"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class LrSchedule:
    kind: str
    total_steps: int
    base_lr: float

    def __call__(self, step: int) -> float:
        if self.kind == "constant":
            return self.base_lr
        return self.base_lr * max(0.0, 1.0 - step / max(self.total_steps, 1))


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Sequence[tuple], state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update over ``(name, tensor)`` pairs, in place.

    Tensors with ``requires_grad=False`` are skipped; a missing ``.grad`` counts as zero.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params:
        if not p.requires_grad:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.dtype, copy=False)


# ----------------------------------------------------------------- losses

def infonce_loss(query_embs: Tensor, passage_embs: Tensor, temperature: float = 0.05,
                 symmetric: bool = True) -> Tensor:
    """In-batch-negative cross entropy on cosine similarities; row i matches row i."""
    B = query_embs.shape[0]
    if B < 2:
        raise ContractError("InfoNCE needs a batch of at least 2 for negatives")
    q = T.l2_normalize(query_embs)
    p = T.l2_normalize(passage_embs)
    eye = np.eye(B, dtype=q.dtype)
    logits = T.scale(T.matmul(q, T.transpose(p, (1, 0))), 1.0 / temperature)
    loss = T.scale(T.sum_all(T.mul(T.log_softmax(logits, axis=1), Tensor(eye))), -1.0 / B)
    if symmetric:
        back = T.scale(T.sum_all(T.mul(T.log_softmax(logits, axis=0), Tensor(eye))), -1.0 / B)
        loss = T.scale(T.add(loss, back), 0.5)
    return loss


def align_loss(src: Tensor, tgt: Tensor, temperature: float = 0.05) -> Tensor:
    """MSE pulls parallel sentences together; InfoNCE keeps unrelated ones apart."""
    return T.add(T.mse(src, tgt), infonce_loss(src, tgt, temperature))


# ---------------------------------------------------------------- helpers

class MetricsLog:
    """JSON-lines writer: one ``{step, loss, lr, wall_ms}`` record per call."""

    def __init__(self, path=None):
        self.path = path
        self.records: list = []
        self._fh = open(path, "w", encoding="utf-8") if path else None
        self._t0 = time.perf_counter()

    def write(self, step: int, loss: float, lr: float) -> None:
        rec = {"step": step, "loss": loss, "lr": lr,
               "wall_ms": int((time.perf_counter() - self._t0) * 1000)}
        self.records.append(rec)
        if self._fh:
            self._fh.write(json.dumps(rec) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


def _check_loss(loss: Tensor, step: int, stage: str) -> float:
    value = float(loss.data)
    if not math.isfinite(value):
        raise DivergenceError(f"{stage}: loss became {value} at step {step}")
    return value


def _run(stage: str, steps: int, config: TrainConfig, params: list,
         step_fn: Callable[[int], Tensor], log: Optional[MetricsLog],
         check: Optional[Callable[[], None]] = None) -> list:
    """Generic loop: forward on a fresh tape, backward, Adam. Returns per-step losses."""
    schedule = LrSchedule(config.schedule, steps, config.learning_rate)
    state = OptimizerState()
    losses = []
    for step in range(steps):
        with Tape():
            loss = step_fn(step)
            T.backward(loss)
        if check is not None:
            check()
        value = _check_loss(loss, step, stage)
        lr = schedule(step)
        adam_step(params, state, lr)
        T.zero_grad(p for _, p in params)
        losses.append(value)
        if log is not None and (step % config.log_every == 0 or step == steps - 1):
            log.write(step, value, lr)
        if step % 250 == 0:
            logger.info("%s step %d loss %.5f lr %.2e", stage, step, value, lr)
    return losses


# -------------------------------------------------------- teacher training

def train_teacher(teacher: TeacherModel, dataset: RetrievalDataset, config: TrainConfig,
                  log: Optional[MetricsLog] = None) -> list:
    """Contrastive training on (query, relevant passage) pairs. Returns the loss curve."""
    if not dataset.qrels:
        raise ContractError("teacher training needs qrels to form pairs")
    params = trainable_parameters(teacher)
    docs = {d: text for d, _, text in dataset.corpus}
    queries = dict(dataset.queries)
    rel = dataset.relevant()
    qids = sorted(rel)
    rel_sorted = {q: sorted(rel[q]) for q in qids}

    def step_fn(step):
        rng = T.counter_rng(config.seed, step, 0)
        chosen = rng.choice(len(qids), size=config.batch_size, replace=len(qids) < config.batch_size)
        q_txt, p_txt = [], []
        for qi in chosen:
            cands = rel_sorted[qids[qi]]
            q_txt.append(queries[qids[qi]])
            p_txt.append(docs[cands[rng.integers(len(cands))]])
        key = (config.seed, step, STREAM_TEACHER)
        qe = teacher.embed(q_txt, "query", training=True, dropout_key=key + (0,))
        pe = teacher.embed(p_txt, "passage", training=True, dropout_key=key + (1,))
        return infonce_loss(qe, pe, config.temperature)

    return _run("teacher", config.steps, config, params, step_fn, log)


# ---------------------------------------------------- multilingual pretraining

def pooled_multilingual(encoder: TransformerEncoder, vocab: Vocabulary, texts: Sequence[str],
                        lang_ids: Sequence[int], training: bool = False,
                        dropout_key: Optional[tuple] = None) -> Tensor:
    """Mean of encoder states over everything but [BOS]/[EOS] (same span the student keeps)."""
    seqs = [tokenize_multilingual(vocab, t, k, encoder.config.max_positions) for t, k in zip(texts, lang_ids)]
    ids, mask = pad_batch(seqs)
    h = encoder.forward(ids, mask, training=training, dropout_key=dropout_key)
    pool_mask = mask.copy()
    pool_mask[:, 0] = 0
    pool_mask[np.arange(len(seqs)), mask.sum(axis=1) - 1] = 0
    return T.masked_mean_pool(h, pool_mask)


def pretrain_multilingual(encoder: TransformerEncoder, vocab: Vocabulary,
                          pairs: Sequence[ParallelPair], config: TrainConfig,
                          log: Optional[MetricsLog] = None) -> list:
    if len({0} | {p.lang_id for p in pairs}) < 2:
        raise ContractError("parallel corpus must span at least two languages")
    params = trainable_parameters(encoder)

    def step_fn(step):
        rng = T.counter_rng(config.seed, step, 0)
        chosen = rng.choice(len(pairs), size=config.batch_size, replace=len(pairs) < config.batch_size)
        batch = [pairs[i] for i in chosen]
        key = (config.seed, step, STREAM_MULTILINGUAL)
        src = pooled_multilingual(encoder, vocab, [p.source for p in batch], [0] * len(batch),
                                  True, key + (0,))
        tgt = pooled_multilingual(encoder, vocab, [p.target for p in batch], [p.lang_id for p in batch],
                                  True, key + (1,))
        return align_loss(src, tgt, config.temperature)

    return _run("multilingual", config.steps, config, params, step_fn, log)


# -------------------------------------------------------------- distillation

class HiddenCache:
    """Frozen multilingual-encoder states per text, computed once."""

    def __init__(self, student: ComposedStudent, texts: Sequence[str], lang_id: int = 0,
                 chunk: int = 64):
        self.hidden, self.seqs = [], []
        for i in range(0, len(texts), chunk):
            part = texts[i:i + chunk]
            seqs = [student.tokenize(t, lang_id) for t in part]
            for s in seqs:
                # one sequence at a time keeps results independent of batch composition
                h = student.multilingual.forward(np.asarray(s.ids), np.asarray(s.attention_mask))
                self.hidden.append(h.data)
                self.seqs.append(s)

    def batch(self, indices) -> MultilingualBatch:
        seqs = [self.seqs[i] for i in indices]
        width = max(len(s) for s in seqs)
        d = self.hidden[indices[0]].shape[-1]
        out = np.zeros((len(seqs), width, d), dtype=self.hidden[indices[0]].dtype)
        for b, i in enumerate(indices):
            out[b, : len(self.seqs[i])] = self.hidden[i]
        return MultilingualBatch(out, seqs)


def embed_in_chunks(fn, items: Sequence, chunk: int = 64) -> np.ndarray:
    parts = [fn(items[i:i + chunk]) for i in range(0, len(items), chunk)]
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, 0))


@dataclass
class DistillResult:
    losses: list
    initial_heldout_mse: float
    final_heldout_mse: float
    initial_heldout_cosine: float
    final_heldout_cosine: float


def heldout_metrics(student: ComposedStudent, teacher: TeacherModel, texts: Sequence[tuple]) -> tuple:
    """Mean MSE and mean cosine between teacher and student embeddings on ``(text, kind)`` items."""
    ht, hs = [], []
    for kind in ("query", "passage"):
        group = [t for t, k in texts if k == kind]
        if not group:
            continue
        ht.append(embed_in_chunks(lambda c: teacher.embed(c, kind).data, group))
        hs.append(embed_in_chunks(lambda c: student.embed(c, 0, kind).data, group))
    ht, hs = np.concatenate(ht), np.concatenate(hs)
    mse = float(np.mean((ht - hs) ** 2))
    cos = np.sum(ht * hs, axis=1) / (np.linalg.norm(ht, axis=1) * np.linalg.norm(hs, axis=1))
    return mse, float(np.mean(cos))


def distill(student: ComposedStudent, teacher: TeacherModel, texts: Sequence[tuple],
            config: TrainConfig, heldout: Sequence[tuple] = (),
            log: Optional[MetricsLog] = None) -> DistillResult:
    """Align the student to the teacher with MSE on English (language 0) ``(text, kind)`` items.

    Each batch holds ``batch_size // 2`` queries and as many passages. Only the
    projection and LoRA tensors may receive gradients.
    """
    params = trainable_parameters(student)
    allowed = {id(t) for t in student.projection.named_tensors().values()}
    allowed |= {id(t) for t in student.lora.named_tensors().values()}
    frozen = [(n, t) for n, t in student.named_tensors().items() if id(t) not in allowed]
    for name, t in frozen:
        if t.requires_grad:
            raise FrozenGradientError(f"{name} should be frozen during distillation")
    if any(t.requires_grad for t in teacher.named_tensors().values()):
        raise FrozenGradientError("teacher must be frozen during distillation")

    by_kind = {k: [t for t, kk in texts if kk == k] for k in ("query", "passage")}
    caches, targets = {}, {}
    for kind, group in by_kind.items():
        if not group:
            continue
        caches[kind] = HiddenCache(student, group)
        targets[kind] = embed_in_chunks(lambda c: teacher.embed(c, kind).data, group)
    kinds = sorted(caches)
    if not kinds:
        raise ContractError("distillation needs at least one text")
    per_kind = max(1, config.batch_size // len(kinds))

    init_mse = init_cos = float("nan")
    if heldout:
        init_mse, init_cos = heldout_metrics(student, teacher, heldout)

    def step_fn(step):
        rng = T.counter_rng(config.seed, step, 0)
        preds, goals = [], []
        for j, kind in enumerate(kinds):
            n = len(caches[kind].seqs)
            idx = rng.choice(n, size=per_kind, replace=n < per_kind)
            key = (config.seed, step, STREAM_HEAD, j)
            preds.append(student.embed_hidden(caches[kind].batch(idx), kind, training=True, dropout_key=key))
            goals.append(targets[kind][idx])
        pred = preds[0] if len(preds) == 1 else T.concat(preds, axis=0)
        return T.mse(pred, Tensor(np.concatenate(goals).astype(pred.dtype)))

    def no_frozen_grads():
        for name, t in frozen:
            if t.grad is not None:
                raise FrozenGradientError(f"gradient reached frozen tensor {name}")

    losses = _run("distill", config.steps, config, params, step_fn, log, no_frozen_grads)
    final_mse = final_cos = float("nan")
    if heldout:
        final_mse, final_cos = heldout_metrics(student, teacher, heldout)
    return DistillResult(losses, init_mse, final_mse, init_cos, final_cos)
