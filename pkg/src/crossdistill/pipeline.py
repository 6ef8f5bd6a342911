"""File-driven pipeline: generate data, train the three stages, evaluate, report.

Layout under the output root::

    data/train/lang_0/          English training set (BEIR layout)
    data/test/lang_<k>/         test set rendered in every language
    data/parallel.jsonl         parallel pairs for multilingual pretraining
    vocab/{teacher,multilingual}.txt
    checkpoints/{teacher,multilingual,distill}/
    logs/<stage>.jsonl          metrics log
    reports/<model>.{json,txt}, reports/summary.{json,txt}
"""

from __future__ import annotations

import copy
import json
import logging
import os
from pathlib import Path

import numpy as np

from . import synth
from .checkpoint import CompatibilityError, assign, config_hash, load_checkpoint, save_checkpoint
from .composition import ComposedStudent, Projection, TeacherModel
from .encoder import EncoderConfig, LoraAdapters, LoraConfig, TransformerEncoder, freeze
from .retrieval import MetricReport, evaluate, random_baseline_ndcg
from .tokenization import Vocabulary, build_multilingual_vocab, build_teacher_vocab
from .training import MetricsLog, TrainConfig, distill, pretrain_multilingual, train_teacher

logger = logging.getLogger(__name__)

ROOT_ENV = "CROSSDISTILL_ROOT"
STAGES = ("teacher", "multilingual", "distill")

_ENCODER = {"d_model": 64, "num_layers": 2, "num_heads": 4, "d_ff": 256,
            "max_positions": 512, "dropout_rate": 0.1}

DEFAULT_CONFIG = {
    "paths": {"root": "runs/default"},
    "data": {
        "num_topics": 8, "vocab_size": 2000, "background_fraction": 0.2, "topical_mass": 0.6,
        "train_docs": 1000, "train_queries": 1000, "test_docs": 400, "test_queries": 80,
        "doc_len": 64, "query_len": 8, "parallel_pairs": 20000, "pair_len": 16,
        "languages": [0, 1, 2, 3], "min_count": 1, "heldout_docs": 80,
    },
    "encoders": {"teacher": dict(_ENCODER), "multilingual": dict(_ENCODER)},
    "lora": {"rank": 32, "alpha": 64.0, "dropout_rate": 0.05, "targets": ["query", "key", "value"]},
    "projection": {"d_hidden": 256, "nonlinear": False},
    "train": {
        "teacher": {"steps": 1000, "batch_size": 32, "learning_rate": 1e-3, "schedule": "linear",
                    "temperature": 0.05, "log_every": 50},
        "multilingual": {"steps": 2000, "batch_size": 32, "learning_rate": 1e-3, "schedule": "linear",
                         "temperature": 0.05, "log_every": 50},
        "distill": {"steps": 2000, "batch_size": 32, "learning_rate": 2e-4, "schedule": "linear",
                    "temperature": 0.05, "log_every": 50},
    },
    "seeds": {"data": 0, "teacher": 1, "multilingual": 2, "student": 3},
    "eval": {"languages": None, "batch_size": 32, "random_trials": 1000},
}


class ConfigError(ValueError):
    pass


class StageOrderError(RuntimeError):
    pass


# ------------------------------------------------------------------ config

def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{where}' must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _parse_scalar(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``"a.b.c=value"`` overrides; values parse as JSON when possible."""
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        dotted, raw = item.split("=", 1)
        node = cfg
        parts = dotted.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown config key '{dotted}'")
            node = node[part]
        if parts[-1] not in node or isinstance(node[parts[-1]], dict):
            raise ConfigError(f"unknown config key '{dotted}'")
        node[parts[-1]] = _parse_scalar(raw)
    return cfg


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = _merge(cfg, user)
    cfg = apply_overrides(cfg, overrides)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    langs = cfg["data"]["languages"]
    if not langs or 0 not in langs or len(set(langs)) != len(langs):
        raise ConfigError("data.languages must list distinct ids including 0")
    try:
        for name in ("teacher", "multilingual"):
            EncoderConfig(vocab_size=1, **cfg["encoders"][name])
        LoraConfig(**cfg["lora"])
        for stage in STAGES:
            TrainConfig(**cfg["train"][stage])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    for stage in ("data", "teacher", "multilingual", "student"):
        if not isinstance(cfg["seeds"].get(stage), int):
            raise ConfigError(f"seeds.{stage} must be an integer")


def model_hash(cfg: dict) -> str:
    """Hash of everything that determines trained tensors (paths and eval settings excluded)."""
    return config_hash({k: v for k, v in cfg.items() if k not in ("paths", "eval")})


def output_root(cfg: dict) -> Path:
    return Path(os.environ.get(ROOT_ENV) or cfg["paths"]["root"])


def _train_config(cfg: dict, stage: str) -> TrainConfig:
    seed_key = "student" if stage == "distill" else stage
    return TrainConfig(seed=cfg["seeds"][seed_key], **cfg["train"][stage])


# ---------------------------------------------------------------- stages

def run_gen(cfg: dict) -> Path:
    root = output_root(cfg)
    d, seed = cfg["data"], cfg["seeds"]["data"]
    tm = synth.build_topic_model(d["num_topics"], d["vocab_size"], seed,
                                 d["background_fraction"], d["topical_mass"])
    ciphers = {k: synth.make_cipher(tm.words, k, seed) for k in d["languages"]}
    train = synth.generate_dataset(tm, d["train_docs"], d["train_queries"], d["doc_len"], d["query_len"], seed + 1)
    test = synth.generate_dataset(tm, d["test_docs"], d["test_queries"], d["doc_len"], d["query_len"], seed + 2)
    synth.write_beir(train, root / "data" / "train" / "lang_0")
    for k, cipher in ciphers.items():
        synth.write_beir(synth.translate(test, cipher), root / "data" / "test" / f"lang_{k}")
    pairs = synth.make_parallel_corpus(tm, list(ciphers.values()), d["parallel_pairs"], seed + 3, d["pair_len"])
    synth.write_parallel(pairs, root / "data" / "parallel.jsonl")
    (root / "vocab").mkdir(parents=True, exist_ok=True)
    texts = [x for _, _, x in train.corpus] + [q for _, q in train.queries]
    build_teacher_vocab(texts, d["min_count"]).save(root / "vocab" / "teacher.txt")
    ml_texts = [p.source for p in pairs] + [p.target for p in pairs]
    build_multilingual_vocab(ml_texts, max(d["languages"]) + 1, d["min_count"]).save(
        root / "vocab" / "multilingual.txt")
    logger.info("generated data under %s", root)
    return root


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise StageOrderError(f"missing prerequisite stage '{stage}' (expected {path})")
    return path


def _vocab(root: Path, name: str) -> Vocabulary:
    return Vocabulary.load(_require(root / "vocab" / f"{name}.txt", "gen"))


def new_encoder(cfg: dict, name: str, vocab: Vocabulary, seed: int) -> TransformerEncoder:
    return TransformerEncoder(EncoderConfig(vocab_size=len(vocab), **cfg["encoders"][name]), seed=seed)


def load_teacher(cfg: dict, root: Path | None = None) -> TeacherModel:
    root = root or output_root(cfg)
    vocab = _vocab(root, "teacher")
    enc = new_encoder(cfg, "teacher", vocab, cfg["seeds"]["teacher"])
    tensors, _ = load_checkpoint(_require(root / "checkpoints" / "teacher", "teacher"), model_hash(cfg))
    assign(enc, tensors)
    return TeacherModel(freeze(enc), vocab)


def load_multilingual(cfg: dict, root: Path | None = None) -> tuple:
    root = root or output_root(cfg)
    vocab = _vocab(root, "multilingual")
    enc = new_encoder(cfg, "multilingual", vocab, cfg["seeds"]["multilingual"])
    tensors, _ = load_checkpoint(_require(root / "checkpoints" / "multilingual", "multilingual"),
                                 model_hash(cfg))
    assign(enc, tensors)
    return freeze(enc), vocab


def build_student(cfg: dict, teacher: TeacherModel, multilingual: TransformerEncoder,
                  ml_vocab: Vocabulary) -> ComposedStudent:
    seed = cfg["seeds"]["student"]
    head = teacher.encoder.config
    lora = LoraAdapters(LoraConfig(**cfg["lora"]), head.d_model, head.num_layers, seed)
    return ComposedStudent.assemble(multilingual, ml_vocab, teacher, lora,
                                    cfg["projection"]["d_hidden"], cfg["projection"]["nonlinear"], seed)


def load_student(cfg: dict, root: Path | None = None) -> ComposedStudent:
    root = root or output_root(cfg)
    teacher = load_teacher(cfg, root)
    ml, ml_vocab = load_multilingual(cfg, root)
    student = build_student(cfg, teacher, ml, ml_vocab)
    tensors, _ = load_checkpoint(_require(root / "checkpoints" / "distill", "distill"), model_hash(cfg))
    for prefix, part in (("multilingual.", student.multilingual), ("head.", student.head),
                         ("projection.", student.projection), ("lora.", student.lora)):
        assign(part, tensors, prefix)
    return student


def distill_texts(cfg: dict, root: Path) -> tuple:
    """English ``(text, kind)`` items for training and for held-out measurement."""
    train = synth.read_beir(_require(root / "data" / "train" / "lang_0", "gen"))
    test = synth.read_beir(_require(root / "data" / "test" / "lang_0", "gen"))
    texts = [(q, "query") for _, q in train.queries] + [(x, "passage") for _, _, x in train.corpus]
    n = cfg["data"]["heldout_docs"]
    heldout = [(q, "query") for _, q in test.queries] + [(x, "passage") for _, _, x in test.corpus[:n]]
    return texts, heldout


def window_means(values, width: int) -> list:
    """Means of consecutive ``width``-long windows (a shorter tail window is dropped)."""
    n = len(values) // width
    return [float(np.mean(values[i * width:(i + 1) * width])) for i in range(n)]


def run_train(cfg: dict, stage: str) -> Path:
    if stage not in STAGES:
        raise ConfigError(f"unknown stage '{stage}'")
    root = output_root(cfg)
    h = model_hash(cfg)
    tc = _train_config(cfg, stage)
    out = root / "checkpoints" / stage
    (root / "logs").mkdir(parents=True, exist_ok=True)
    log = MetricsLog(root / "logs" / f"{stage}.jsonl")
    try:
        if stage == "teacher":
            vocab = _vocab(root, "teacher")
            data = synth.read_beir(_require(root / "data" / "train" / "lang_0", "gen"))
            teacher = TeacherModel(new_encoder(cfg, "teacher", vocab, tc.seed), vocab)
            losses = train_teacher(teacher, data, tc, log)
            save_checkpoint(out, teacher.named_tensors(), h, "teacher", {"vocab_size": len(vocab)})
            summary = {"first_loss": losses[0] if losses else None, "last_loss": losses[-1] if losses else None}
        elif stage == "multilingual":
            vocab = _vocab(root, "multilingual")
            pairs = synth.read_parallel(_require(root / "data" / "parallel.jsonl", "gen"))
            enc = new_encoder(cfg, "multilingual", vocab, tc.seed)
            losses = pretrain_multilingual(enc, vocab, pairs, tc, log)
            save_checkpoint(out, enc.named_tensors(), h, "multilingual", {"vocab_size": len(vocab)})
            summary = {"first_loss": losses[0] if losses else None, "last_loss": losses[-1] if losses else None}
        else:
            _require(root / "checkpoints" / "teacher" / "manifest.json", "teacher")
            _require(root / "checkpoints" / "multilingual" / "manifest.json", "multilingual")
            teacher = load_teacher(cfg, root)
            ml, ml_vocab = load_multilingual(cfg, root)
            student = build_student(cfg, teacher, ml, ml_vocab)
            texts, heldout = distill_texts(cfg, root)
            res = distill(student, teacher, texts, tc, heldout, log)
            save_checkpoint(out, student.named_tensors(), h, "student")
            summary = {"initial_heldout_mse": res.initial_heldout_mse, "final_heldout_mse": res.final_heldout_mse,
                       "initial_heldout_cosine": res.initial_heldout_cosine,
                       "final_heldout_cosine": res.final_heldout_cosine,
                       "first_loss": res.losses[0] if res.losses else None,
                       "last_loss": res.losses[-1] if res.losses else None,
                       "loss_window_means": window_means(res.losses, 50)}
    finally:
        log.close()
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return out


def _test_sets(root: Path, languages) -> dict:
    return {k: synth.read_beir(_require(root / "data" / "test" / f"lang_{k}", "gen")) for k in languages}


def run_eval(cfg: dict, model: str = "student", languages=None) -> MetricReport:
    """Evaluate ``teacher`` or ``student`` and write ``reports/<model>.{json,txt}``."""
    root = output_root(cfg)
    languages = languages if languages is not None else (cfg["eval"]["languages"] or cfg["data"]["languages"])
    if model == "teacher":
        m = load_teacher(cfg, root)
    elif model == "student":
        m = load_student(cfg, root)
    else:
        raise ConfigError(f"unknown model '{model}' (teacher or student)")
    report = evaluate(m, _test_sets(root, languages), "synthetic", cfg["eval"]["batch_size"])
    (root / "reports").mkdir(parents=True, exist_ok=True)
    report.save(root / "reports" / f"{model}.json", root / "reports" / f"{model}.txt")
    return report


def run_report(cfg: dict) -> dict:
    """NDCG@10 per language for random / teacher / student side by side."""
    root = output_root(cfg)
    test0 = synth.read_beir(_require(root / "data" / "test" / "lang_0", "gen"))
    mean, se = random_baseline_ndcg(test0, 10, cfg["eval"]["random_trials"], cfg["seeds"]["data"])
    columns = {}
    for model in ("teacher", "student"):
        path = root / "reports" / f"{model}.json"
        if path.exists():
            rep = MetricReport.load(path)
            columns[model] = {lang: v["ndcg@10"] for lang, v in rep.results["synthetic"].items()}
    langs = sorted({lang for col in columns.values() for lang in col}, key=lambda s: int(s.split("_")[1]))
    summary = {"random_ndcg@10": {"mean": mean, "stderr": se}, "ndcg@10": columns}
    lines = [f"{'Language':<10}{'Random':>10}" + "".join(f"{m.capitalize():>10}" for m in columns)]
    lines.append("-" * len(lines[0]))
    for lang in langs:
        cells = "".join(f"{100 * columns[m][lang]:>10.2f}" if lang in columns[m] else f"{'-':>10}" for m in columns)
        lines.append(f"{lang:<10}{100 * mean:>10.2f}{cells}")
    (root / "reports").mkdir(parents=True, exist_ok=True)
    (root / "reports" / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (root / "reports" / "summary.txt").write_text("NDCG@10 (x100)\n" + "\n".join(lines) + "\n")
    return summary
