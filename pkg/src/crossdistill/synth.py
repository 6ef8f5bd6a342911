"""Synthetic topical retrieval benchmarks and their cipher-language renditions.

Every text is a space-separated list of content words drawn from a topic's word
distribution. A cipher language is a bijective word substitution, so all
languages carry identical semantics and qrels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

_CONSONANTS = "bcdfghjkmnprstvz"
_VOWELS = "aeiou"
_FORBIDDEN = {"query", "passage"}


class GenerationError(RuntimeError):
    pass


class VocabularyCoverageError(KeyError):
    pass


class BeirFormatError(ValueError):
    pass


def _rng(seed, *stream) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *stream]))


def make_content_words(size: int, seed: int) -> list[str]:
    """Deterministic pronounceable pseudo-words (2-4 CV syllables), all distinct."""
    rng = _rng(seed, 1)
    words: list[str] = []
    seen = set(_FORBIDDEN)
    while len(words) < size:
        n_syl = int(rng.integers(2, 5))
        w = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(n_syl))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


@dataclass
class TopicModel:
    """``probs[t]`` is topic t's distribution over ``words``."""

    num_topics: int
    words: list
    probs: np.ndarray
    seed: int

    def head_words(self, topic: int, n: int = 10) -> list[str]:
        order = np.lexsort((np.arange(len(self.words)), -self.probs[topic]))
        return [self.words[i] for i in order[:n]]


def build_topic_model(num_topics: int = 8, vocab_size: int = 2000, seed: int = 0,
                      background_fraction: float = 0.2, topical_mass: float = 0.6,
                      zipf_exponent: float = 1.0) -> TopicModel:
    """Topic t puts ``topical_mass`` on its own block of words (Zipf-shaped) and the
    rest uniformly on a background block shared by all topics.
    """
    if num_topics < 1 or vocab_size < num_topics * 11:
        raise ValueError("vocab too small for the requested number of topics")
    words = make_content_words(vocab_size, seed)
    rng = _rng(seed, 2)
    perm = rng.permutation(vocab_size)
    n_bg = int(round(background_fraction * vocab_size))
    background = perm[:n_bg]
    blocks = np.array_split(perm[n_bg:], num_topics)
    probs = np.zeros((num_topics, vocab_size))
    for t, block in enumerate(blocks):
        ranks = np.arange(1, len(block) + 1, dtype=float)
        z = ranks ** -zipf_exponent
        probs[t, block] = topical_mass * z / z.sum()
        if n_bg:
            probs[t, background] = (1.0 - topical_mass) / n_bg
        else:
            probs[t, block] /= topical_mass
    return TopicModel(num_topics, words, probs, seed)


@dataclass
class CipherLanguageSpec:
    lang_id: int
    seed: int
    mapping: dict = field(repr=False)

    def __post_init__(self):
        self.inverse_mapping = {v: k for k, v in self.mapping.items()}
        if len(self.inverse_mapping) != len(self.mapping):
            raise ValueError("cipher is not injective")

    def encode(self, text: str) -> str:
        return " ".join(self._lookup(self.mapping, w) for w in text.split())

    def decode(self, text: str) -> str:
        return " ".join(self._lookup(self.inverse_mapping, w) for w in text.split())

    def inverse(self) -> "CipherLanguageSpec":
        return CipherLanguageSpec(self.lang_id, self.seed, dict(self.inverse_mapping))

    def _lookup(self, table: dict, word: str) -> str:
        try:
            return table[word]
        except KeyError:
            raise VocabularyCoverageError(f"language {self.lang_id}: word {word!r} not covered") from None


def make_cipher(words: Sequence[str], lang_id: int, seed: int) -> CipherLanguageSpec:
    """Language 0 is the identity; language k maps w -> ``L<k>_<pi(w)>`` for a seeded permutation pi."""
    if lang_id == 0:
        return CipherLanguageSpec(0, seed, {w: w for w in words})
    perm = _rng(seed, 3, lang_id).permutation(len(words))
    return CipherLanguageSpec(lang_id, seed, {w: f"L{lang_id}_{words[j]}" for w, j in zip(words, perm)})


@dataclass
class RetrievalDataset:
    corpus: list  # (doc_id, title, text)
    queries: list  # (query_id, text)
    qrels: list  # (query_id, doc_id, relevance)

    def relevant(self) -> dict:
        rel: dict = {}
        for qid, did, score in self.qrels:
            if score > 0:
                rel.setdefault(qid, set()).add(did)
        return rel


def _sample_text(rng, model: TopicModel, topic: int, length: int) -> str:
    idx = rng.choice(len(model.words), size=length, p=model.probs[topic])
    return " ".join(model.words[i] for i in idx)


def generate_dataset(model: TopicModel, num_docs: int = 400, num_queries: int = 80,
                     doc_len: int = 64, query_len: int = 8, seed: int = 0,
                     max_retries: int = 100) -> RetrievalDataset:
    """Documents and queries each from a uniformly chosen topic; a query's relevant
    documents are exactly those sharing its topic."""
    rng = _rng(seed, 4)
    doc_topics = rng.integers(model.num_topics, size=num_docs)
    corpus = [(f"d{i:05d}", "", _sample_text(rng, model, int(t), doc_len)) for i, t in enumerate(doc_topics)]
    present = set(int(t) for t in doc_topics)
    queries, qrels = [], []
    for j in range(num_queries):
        for _ in range(max_retries):
            t = int(rng.integers(model.num_topics))
            if t in present:
                break
        else:
            raise GenerationError(f"query {j}: no topic with documents after {max_retries} draws")
        qid = f"q{j:04d}"
        queries.append((qid, _sample_text(rng, model, t, query_len)))
        qrels.extend((qid, did, 1) for (did, _, _), dt in zip(corpus, doc_topics) if dt == t)
    return RetrievalDataset(corpus, queries, qrels)


def translate(dataset: RetrievalDataset, cipher: CipherLanguageSpec) -> RetrievalDataset:
    return RetrievalDataset(
        [(d, cipher.encode(title), cipher.encode(text)) for d, title, text in dataset.corpus],
        [(q, cipher.encode(text)) for q, text in dataset.queries],
        list(dataset.qrels),
    )


@dataclass(frozen=True)
class ParallelPair:
    source: str
    target: str
    lang_id: int


def make_parallel_corpus(model: TopicModel, languages: Sequence[CipherLanguageSpec],
                         num_pairs: int, seed: int, length: int = 16) -> list[ParallelPair]:
    """Round-robin over the non-identity languages, and over topics within each language."""
    targets = [c for c in languages if c.lang_id != 0]
    if not targets:
        raise ValueError("parallel corpus needs at least one non-identity language")
    rng = _rng(seed, 5)
    pairs = []
    for i in range(num_pairs):
        cipher = targets[i % len(targets)]
        topic = (i // len(targets)) % model.num_topics
        src = _sample_text(rng, model, topic, length)
        pairs.append(ParallelPair(src, cipher.encode(src), cipher.lang_id))
    return pairs


# ------------------------------------------------------------------ BEIR io

def write_beir(dataset: RetrievalDataset, directory) -> None:
    root = Path(directory)
    (root / "qrels").mkdir(parents=True, exist_ok=True)
    with open(root / "corpus.jsonl", "w", encoding="utf-8") as f:
        for did, title, text in dataset.corpus:
            f.write(json.dumps({"_id": did, "title": title, "text": text}, ensure_ascii=False) + "\n")
    with open(root / "queries.jsonl", "w", encoding="utf-8") as f:
        for qid, text in dataset.queries:
            f.write(json.dumps({"_id": qid, "text": text}, ensure_ascii=False) + "\n")
    with open(root / "qrels" / "test.tsv", "w", encoding="utf-8") as f:
        f.write("query-id\tcorpus-id\tscore\n")
        for qid, did, score in dataset.qrels:
            f.write(f"{qid}\t{did}\t{score}\n")


def _read_jsonl(path: Path, fields: Sequence[str]) -> list:
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rows.append(tuple(obj[k] if k != "title" else obj.get(k, "") for k in fields))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise BeirFormatError(f"{path}:{lineno}: {exc}") from None
    return rows


def read_beir(directory, split: str = "test") -> RetrievalDataset:
    root = Path(directory)
    corpus = _read_jsonl(root / "corpus.jsonl", ("_id", "title", "text"))
    queries = _read_jsonl(root / "queries.jsonl", ("_id", "text"))
    qrels = []
    with open(root / "qrels" / f"{split}.tsv", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if lineno == 1 or not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            try:
                qrels.append((parts[0], parts[1], int(parts[2])))
            except (IndexError, ValueError):
                raise BeirFormatError(f"{root / 'qrels' / split}.tsv:{lineno}: malformed qrels row") from None
    return RetrievalDataset(corpus, queries, qrels)


def write_parallel(pairs: Sequence[ParallelPair], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in pairs:
            f.write(json.dumps({"lang": p.lang_id, "source": p.source, "target": p.target}) + "\n")


def read_parallel(path) -> list[ParallelPair]:
    return [ParallelPair(s, t, int(k)) for k, s, t in _read_jsonl(Path(path), ("lang", "source", "target"))]
