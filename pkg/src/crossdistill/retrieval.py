"""Exact dense retrieval, NDCG / recall, and per-language evaluation reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .tensor import ContractError
from .synth import RetrievalDataset
from .tokenization import split_words


@dataclass
class EmbeddingIndex:
    doc_ids: list
    matrix: np.ndarray  # [N, d]
    similarity: str = "cosine"

    def __post_init__(self):
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise ValueError("doc ids must be unique")
        if self.matrix.shape[0] != len(self.doc_ids):
            raise ValueError("one embedding row per doc id")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("index rows must be finite")
        if self.similarity not in ("cosine", "dot"):
            raise ValueError(f"unknown similarity {self.similarity!r}")
        # position of each doc in ascending-id order, used for tie-breaks
        order = sorted(range(len(self.doc_ids)), key=lambda i: self.doc_ids[i])
        self._id_rank = np.empty(len(order), dtype=np.int64)
        self._id_rank[order] = np.arange(len(order))

    def __len__(self) -> int:
        return len(self.doc_ids)

    def scores(self, queries: np.ndarray) -> np.ndarray:
        m = np.asarray(self.matrix, dtype=np.float64)
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if self.similarity == "cosine":
            m = _unit_rows(m)
            q = _unit_rows(q)
        # row by row: a query's scores must not depend on which other queries share the call
        return np.stack([m @ row for row in q]) if len(q) else np.zeros((0, len(m)))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norm == 0.0, 1.0, norm)


def cosine(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(x @ y / (np.linalg.norm(x) * np.linalg.norm(y)))


def _rank(index: EmbeddingIndex, scores: np.ndarray, k: int) -> list:
    order = np.lexsort((index._id_rank, -scores))[:k]
    return [(index.doc_ids[i], float(scores[i])) for i in order]


def search(index: EmbeddingIndex, query_emb, k: int = 10) -> list:
    """Top-``k`` ``(doc_id, score)``; ties go to the smaller doc id."""
    if k < 1:
        raise ContractError("k must be >= 1")
    if len(index) == 0:
        raise ContractError("cannot search an empty index")
    return _rank(index, index.scores(query_emb)[0], k)


def search_many(index: EmbeddingIndex, query_embs: np.ndarray, k: int = 10) -> list:
    if k < 1:
        raise ContractError("k must be >= 1")
    if len(index) == 0:
        raise ContractError("cannot search an empty index")
    all_scores = index.scores(query_embs)
    return [_rank(index, row, k) for row in all_scores]


# ------------------------------------------------------------------ metrics

def _ids(ranking) -> list:
    return [r[0] if isinstance(r, tuple) else r for r in ranking]


def ndcg_at_k(ranking, relevant, k: int = 10) -> float:
    """Binary-gain NDCG@k. ``relevant`` is the set of relevant doc ids.

    Returns NaN when nothing is relevant, so such queries can be skipped.
    """
    if k < 1:
        raise ContractError("k must be >= 1")
    relevant = set(relevant)
    if not relevant:
        return float("nan")
    dcg = sum(1.0 / math.log2(i + 2) for i, d in enumerate(_ids(ranking)[:k]) if d in relevant)
    ideal = sum(1.0 / math.log2(i + 2) for i in range(min(len(relevant), k)))
    return dcg / ideal


def recall_at_k(ranking, relevant, k: int) -> float:
    if k < 1:
        raise ContractError("k must be >= 1")
    relevant = set(relevant)
    if not relevant:
        return float("nan")
    return len(relevant.intersection(_ids(ranking)[:k])) / len(relevant)


def mean_over_queries(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def random_baseline_ndcg(dataset: RetrievalDataset, k: int = 10, trials: int = 1000,
                         seed: int = 0) -> tuple:
    """Monte-Carlo ``(mean, standard error)`` of NDCG@k under uniformly random rankings."""
    if trials < 1000:
        raise ContractError("random baseline needs at least 1000 trials")
    doc_pos = {d: i for i, (d, _, _) in enumerate(dataset.corpus)}
    rel = dataset.relevant()
    qids = [q for q, _ in dataset.queries if rel.get(q)]
    N = len(doc_pos)
    R = np.zeros((len(qids), N), dtype=bool)
    for row, q in enumerate(qids):
        R[row, [doc_pos[d] for d in rel[q]]] = True
    kk = min(k, N)
    discount = 1.0 / np.log2(np.arange(2, kk + 2))
    n_rel = R.sum(axis=1)
    idcg = np.array([discount[: min(n, kk)].sum() for n in n_rel])
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 53]))
    per_trial = np.empty(trials)
    rows = np.arange(len(qids))[:, None]
    for t in range(trials):
        keys = rng.random((len(qids), N))
        top = np.argpartition(keys, kk - 1, axis=1)[:, :kk] if kk < N else np.tile(np.arange(N), (len(qids), 1))
        top = np.take_along_axis(top, np.argsort(keys[rows, top], axis=1), axis=1)
        per_trial[t] = np.mean((R[rows, top] * discount).sum(axis=1) / idcg)
    return float(per_trial.mean()), float(per_trial.std(ddof=1) / math.sqrt(trials))


# ---------------------------------------------------------------- embedding

EmbedFn = Callable[[Sequence[str], int, str], np.ndarray]


def as_embed_fn(model) -> EmbedFn:
    """Uniform ``(texts, lang_id, kind) -> [B, d]`` view of a teacher, student or baseline."""
    from .composition import ComposedStudent, TeacherModel

    if isinstance(model, TeacherModel):
        return lambda texts, lang, kind: model.embed(texts, kind).data
    if isinstance(model, ComposedStudent):
        return lambda texts, lang, kind: model.embed(texts, lang, kind).data
    if callable(model):
        return model
    return model.embed


def embed_texts(model, texts: Sequence[str], lang_id: int, kind: str, batch_size: int = 32) -> np.ndarray:
    """Embed in batches of equal word count, so no padding ever enters a batch."""
    fn = as_embed_fn(model)
    if not texts:
        return np.zeros((0, 0))
    groups: dict = {}
    for i, t in enumerate(texts):
        groups.setdefault(len(split_words(t)), []).append(i)
    out = None
    for _, idx in sorted(groups.items()):
        for s in range(0, len(idx), batch_size):
            chunk = idx[s:s + batch_size]
            emb = np.asarray(fn([texts[i] for i in chunk], lang_id, kind))
            if out is None:
                out = np.zeros((len(texts), emb.shape[1]), dtype=emb.dtype)
            out[chunk] = emb
    return out


def _doc_text(title: str, text: str) -> str:
    return f"{title} {text}".strip()


def embed_corpus(model, dataset: RetrievalDataset, lang_id: int, kind: str = "passage",
                 batch_size: int = 32, similarity: str = "cosine") -> EmbeddingIndex:
    ids = [d for d, _, _ in dataset.corpus]
    if not ids:
        return EmbeddingIndex([], np.zeros((0, 0)), similarity)
    try:
        mat = embed_texts(model, [_doc_text(t, x) for _, t, x in dataset.corpus], lang_id, kind, batch_size)
    except Exception as exc:
        raise type(exc)(f"while embedding corpus of {len(ids)} docs (first id {ids[0]}): {exc}") from exc
    return EmbeddingIndex(ids, mat, similarity)


class BagOfWords:
    """Term-count vectors over a fixed word list; a lexical baseline."""

    def __init__(self, texts: Sequence[str]):
        words = sorted({w for t in texts for w in split_words(t)})
        self.index = {w: i for i, w in enumerate(words)}

    def embed(self, texts, lang_id=0, kind="passage") -> np.ndarray:
        out = np.zeros((len(texts), len(self.index)))
        for r, t in enumerate(texts):
            for w in split_words(t):
                j = self.index.get(w)
                if j is not None:
                    out[r, j] += 1.0
        return out


# ------------------------------------------------------------------ reports

METRICS = ("ndcg@10", "recall@10", "recall@100")


@dataclass
class MetricReport:
    """``results[dataset][language][metric]``; languages are string keys like ``"lang_0"``."""

    results: dict = field(default_factory=dict)

    def macro(self) -> dict:
        out = {}
        for ds, langs in self.results.items():
            out[ds] = {m: float(np.mean([v[m] for v in langs.values()])) for m in METRICS}
        return out

    def to_dict(self) -> dict:
        return {"results": self.results, "macro": self.macro()}

    def save(self, path_json, path_txt=None) -> None:
        Path(path_json).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        if path_txt is not None:
            Path(path_txt).write_text(self.render())

    @classmethod
    def load(cls, path) -> "MetricReport":
        return cls(json.loads(Path(path).read_text())["results"])

    def render(self, title: str = "") -> str:
        lines = [title] if title else []
        head = f"{'Dataset':<14}{'Language':<10}" + "".join(f"{m:>12}" for m in METRICS)
        rule = "-" * len(head)
        lines += [rule, head, rule]
        macro = self.macro()
        for ds, langs in self.results.items():
            for lang, vals in langs.items():
                lines.append(f"{ds:<14}{lang:<10}" + "".join(f"{100 * vals[m]:>12.2f}" for m in METRICS))
            lines.append(f"{ds:<14}{'Average':<10}" + "".join(f"{100 * macro[ds][m]:>12.2f}" for m in METRICS))
            lines.append(rule)
        return "\n".join(lines) + "\n"


def evaluate_dataset(model, dataset: RetrievalDataset, lang_id: int, batch_size: int = 32) -> dict:
    index = embed_corpus(model, dataset, lang_id, "passage", batch_size)
    q_emb = embed_texts(model, [t for _, t in dataset.queries], lang_id, "query", batch_size)
    runs = search_many(index, q_emb, k=100)
    rel = dataset.relevant()
    qids = [q for q, _ in dataset.queries]
    return {
        "ndcg@10": mean_over_queries(ndcg_at_k(r, rel.get(q, ()), 10) for q, r in zip(qids, runs)),
        "recall@10": mean_over_queries(recall_at_k(r, rel.get(q, ()), 10) for q, r in zip(qids, runs)),
        "recall@100": mean_over_queries(recall_at_k(r, rel.get(q, ()), 100) for q, r in zip(qids, runs)),
    }


def evaluate(model, datasets: Mapping[int, RetrievalDataset], name: str = "synthetic",
             batch_size: int = 32, report: Optional[MetricReport] = None) -> MetricReport:
    """Per-language metrics for ``model`` on ``{lang_id: dataset}``."""
    report = report or MetricReport()
    block = report.results.setdefault(name, {})
    for lang_id in sorted(datasets):
        block[f"lang_{lang_id}"] = evaluate_dataset(model, datasets[lang_id], lang_id, batch_size)
    return report
