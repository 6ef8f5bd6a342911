import json

import numpy as np
import pytest

from crossdistill import pipeline
from crossdistill.checkpoint import (CheckpointError, CompatibilityError, config_hash, decode_tensor,
                                     encode_tensor, load_checkpoint, save_checkpoint)
from crossdistill.cli import main

TINY = [
    "data.train_docs=40", "data.train_queries=40", "data.test_docs=30", "data.test_queries=8",
    "data.doc_len=12", "data.query_len=4", "data.parallel_pairs=60", "data.pair_len=6",
    "data.vocab_size=120", "data.num_topics=4", "data.heldout_docs=10", "data.languages=[0,1]",
    "encoders.teacher.d_model=8", "encoders.teacher.d_ff=16", "encoders.teacher.num_layers=1",
    "encoders.teacher.num_heads=2", "encoders.teacher.max_positions=64",
    "encoders.multilingual.d_model=8", "encoders.multilingual.d_ff=16",
    "encoders.multilingual.num_layers=1", "encoders.multilingual.num_heads=2",
    "encoders.multilingual.max_positions=64",
    "lora.rank=2", "lora.alpha=4", "projection.d_hidden=12",
    "train.teacher.steps=3", "train.multilingual.steps=3", "train.distill.steps=3",
    "train.teacher.batch_size=4", "train.multilingual.batch_size=4", "train.distill.batch_size=4",
]


def args(*extra):
    return [a for item in TINY + list(extra) for a in ("--set", item)]


@pytest.fixture
def root(tmp_path, monkeypatch):
    monkeypatch.setenv(pipeline.ROOT_ENV, str(tmp_path / "run"))
    return tmp_path / "run"


def test_tensor_record_layout():
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    rec = encode_tensor(arr)
    assert rec[:12] == np.array([2, 2, 3], dtype="<i4").tobytes()
    assert len(rec) == 12 + 24
    np.testing.assert_array_equal(decode_tensor(rec), arr)
    assert decode_tensor(encode_tensor(np.float32(2.5))).shape == ()


def test_checkpoint_roundtrip_bitwise(tmp_path, rng):
    tensors = {"b": rng.normal(size=(3, 4)).astype(np.float32), "a": np.array([np.float32(-0.0), 1e-38]),
               "empty": np.zeros((0, 5), np.float32)}
    save_checkpoint(tmp_path, tensors, "abc", "test")
    loaded, manifest = load_checkpoint(tmp_path, "abc")
    for k, v in tensors.items():
        assert loaded[k].tobytes() == np.asarray(v, np.float32).tobytes()
    assert manifest["kind"] == "test"
    with pytest.raises(CompatibilityError):
        load_checkpoint(tmp_path, "other")


def test_truncated_blob(tmp_path):
    save_checkpoint(tmp_path, {"x": np.ones(4, np.float32)}, "h", "test")
    blob = (tmp_path / "tensors.bin").read_bytes()
    (tmp_path / "tensors.bin").write_bytes(blob[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)


def test_config_hash_is_order_independent():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert len(config_hash({})) == 16


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(pipeline.ConfigError):
            pipeline.load_config(overrides=["train.distill.stepz=3"])

    def test_file_and_override(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"train": {"distill": {"steps": 7}}}))
        cfg = pipeline.load_config(tmp_path / "c.json", ["lora.rank=4"])
        assert cfg["train"]["distill"]["steps"] == 7 and cfg["lora"]["rank"] == 4

    def test_hash_ignores_paths_and_eval(self):
        a = pipeline.load_config()
        b = pipeline.load_config(overrides=["paths.root=/elsewhere", "eval.batch_size=8"])
        c = pipeline.load_config(overrides=["lora.rank=8"])
        assert pipeline.model_hash(a) == pipeline.model_hash(b) != pipeline.model_hash(c)

    def test_languages_need_zero(self):
        with pytest.raises(pipeline.ConfigError):
            pipeline.load_config(overrides=["data.languages=[1,2]"])


def test_gen_is_idempotent(root):
    assert main(["gen"] + args()) == 0
    snap = {p: p.read_bytes() for p in root.rglob("*") if p.is_file()}
    assert main(["gen"] + args()) == 0
    assert snap == {p: p.read_bytes() for p in root.rglob("*") if p.is_file()}


def test_full_cli_flow_and_exit_codes(root, capsys):
    assert main(["train", "distill"] + args()) == 3
    assert main(["gen"] + args()) == 0
    assert main(["train", "distill"] + args()) == 3
    for stage in ("teacher", "multilingual", "distill"):
        assert main(["train", stage] + args()) == 0
    assert main(["eval", "--model", "teacher"] + args()) == 0
    assert main(["eval"] + args()) == 0
    assert main(["report"] + args()) == 0
    out = capsys.readouterr().out
    assert "Random" in out and "lang_1" in out
    summary = json.loads((root / "reports" / "summary.json").read_text())
    assert set(summary["ndcg@10"]) == {"teacher", "student"}
    # a changed model config cannot reuse these checkpoints
    assert main(["eval"] + args("lora.rank=3")) == 5
    # eval-only settings do not invalidate them
    assert main(["eval", "--languages", "1"] + args("eval.batch_size=5")) == 0


def test_bad_config_exit_code(root, tmp_path):
    assert main(["gen"] + args("data.nope=1")) == 2
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["gen", "--config", str(tmp_path / "bad.json")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(root):
    assert main(["gen"] + args()) == 0
    assert main(["train", "teacher"] + args("train.teacher.learning_rate=1e300")) == 4
