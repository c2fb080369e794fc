"""
Training the planner end to end
===============================

Straight drives, exploration in unsafe states, planner-driven training and a
three-lap evaluation on a held-out track, compared with two baselines. The
default configuration takes under a minute on one core.
"""

import sys

from epiplan import pipeline
from epiplan.config import RunConfig

cfg = RunConfig().with_overrides(sys.argv[1:])
result = pipeline.run_all(cfg)

curve = [v for _, v in result.curve]
print("training success, first ten:", [round(v) for v in curve[:10]])
print("training success, last ten: ", [round(v) for v in curve[-10:]])
print(result.metrics.row("planner"))

env = pipeline.make_eval_env(cfg)
print(pipeline.baseline_random(env, cfg.baseline_seed).row("random"))
print(pipeline.baseline_centerline(pipeline.make_eval_env(cfg), cfg.baseline_speed).row("centerline"))
