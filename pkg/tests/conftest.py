import os
import time

import numpy as np
import pytest

from crossdistill import pipeline
from crossdistill import tensor as T
from crossdistill.tensor import Tape, Tensor

FD_STEP = 1e-5
FD_TOL = 1e-4


def numeric_grad(loss_fn, t: Tensor, step: float = FD_STEP, indices=None) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. entries of ``t`` (in place perturbation)."""
    flat = t.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in (range(flat.size) if indices is None else indices):
        old = flat[i]
        flat[i] = old + step
        up = float(loss_fn().data)
        flat[i] = old - step
        down = float(loss_fn().data)
        flat[i] = old
        grad[i] = (up - down) / (2 * step)
    return grad.reshape(t.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor); the floor is 1e-3 of the tensor's largest
    gradient (at least 1e-6) so that entries that are zero up to rounding do not dominate.
    Key biases, for instance, have an exactly zero gradient under softmax shift invariance."""
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-3)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3 * scale)
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradcheck(loss_fn, tensors, max_entries=None, seed=0) -> float:
    """Worst relative error over ``tensors`` between backward() and central differences."""
    with Tape():
        loss = loss_fn()
        T.backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        idx = None
        if max_entries is not None and t.data.size > max_entries:
            idx = rng.choice(t.data.size, size=max_entries, replace=False)
        numeric = numeric_grad(loss_fn, t, indices=idx)
        if idx is not None:
            analytic = analytic.reshape(-1)[idx]
            numeric = numeric.reshape(-1)[idx]
        worst = max(worst, relative_error(analytic, numeric))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True, dtype=np.float64)


TEXTS = ["ba ko mi", "ko ko lu ta", "mi ta", "lu ba ba ko"]


def tiny_student(dtype=np.float64, head_positions=32, ml_positions=32, lora_seed=0, lora_b_std=0.0):
    """A two-layer composed student small enough for finite differences."""
    from crossdistill.composition import ComposedStudent, TeacherModel
    from crossdistill.encoder import EncoderConfig, LoraAdapters, LoraConfig, TransformerEncoder, freeze
    from crossdistill.tokenization import build_multilingual_vocab, build_teacher_vocab

    tvocab = build_teacher_vocab(TEXTS)
    mvocab = build_multilingual_vocab(TEXTS + ["l1_ab l1_ok l1_im l1_ul l1_at"], 2)
    tcfg = EncoderConfig(len(tvocab), d_model=8, num_layers=2, num_heads=2, d_ff=16, max_positions=head_positions)
    mcfg = EncoderConfig(len(mvocab), d_model=6, num_layers=2, num_heads=2, d_ff=12, max_positions=ml_positions)
    teacher = TeacherModel(freeze(TransformerEncoder(tcfg, seed=1, dtype=dtype)), tvocab)
    ml = TransformerEncoder(mcfg, seed=2, dtype=dtype)
    lora = LoraAdapters(LoraConfig(rank=2, alpha=4.0), 8, 2, seed=lora_seed, dtype=dtype)
    if lora_b_std:
        r = np.random.default_rng(99)
        for n, t in lora.params.items():
            if n.endswith(".B"):
                t.data[...] = r.normal(0, lora_b_std, t.shape)
    student = ComposedStudent.assemble(ml, mvocab, teacher, lora, d_hidden=10, seed=3)
    return teacher, student


# ------------------------------------------------ shared default-config runs

def run_pipeline(root):
    old = os.environ.pop(pipeline.ROOT_ENV, None)
    try:
        cfg = pipeline.load_config(overrides=[f"paths.root={root}"])
        timings = {}
        steps = [("gen", lambda: pipeline.run_gen(cfg))]
        steps += [(s, lambda s=s: pipeline.run_train(cfg, s)) for s in pipeline.STAGES]
        steps += [("eval_teacher", lambda: pipeline.run_eval(cfg, "teacher")),
                  ("eval_student", lambda: pipeline.run_eval(cfg, "student")),
                  ("report", lambda: pipeline.run_report(cfg))]
        for name, fn in steps:
            t0 = time.perf_counter()
            fn()
            timings[name] = time.perf_counter() - t0
    finally:
        if old is not None:
            os.environ[pipeline.ROOT_ENV] = old
    return cfg, timings


@pytest.fixture(scope="session")
def full_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept") / "run_a"
    cfg, timings = run_pipeline(root)
    return root, cfg, timings


@pytest.fixture(scope="session")
def second_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept") / "run_b"
    run_pipeline(root)
    return root
