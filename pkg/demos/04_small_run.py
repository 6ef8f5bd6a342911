"""A scaled-down end-to-end run: generate, train three stages, evaluate, report.

The default configuration takes about five minutes on one core; this one takes seconds
and only shows the moving parts. Numbers from it mean little.
"""

# %%
import os
import tempfile

from crossdistill import pipeline

SMALL = [
    "data.train_docs=200", "data.train_queries=200", "data.test_docs=120", "data.test_queries=24",
    "data.parallel_pairs=2000", "data.heldout_docs=24",
    "train.teacher.steps=150", "train.multilingual.steps=200", "train.distill.steps=200",
    "encoders.teacher.d_model=32", "encoders.teacher.d_ff=64",
    "encoders.multilingual.d_model=32", "encoders.multilingual.d_ff=64",
]

with tempfile.TemporaryDirectory() as tmp:
    os.environ[pipeline.ROOT_ENV] = tmp
    cfg = pipeline.load_config(overrides=SMALL)
    pipeline.run_gen(cfg)
    for stage in pipeline.STAGES:
        pipeline.run_train(cfg, stage)
    pipeline.run_eval(cfg, "teacher")
    print(pipeline.run_eval(cfg, "student").render("student"))
    pipeline.run_report(cfg)
    print(open(os.path.join(tmp, "reports", "summary.txt")).read())
