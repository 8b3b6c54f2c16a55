"""Train a full decoder and a routed one on the same synthetic streams and compare.

Takes a few minutes on one core. Pass a step count to change the budget.
"""

import sys
import time

from modstream.harness import (OptimizerConfig, SyntheticTaskConfig, default_baselines, rows_csv,
                               run_baseline_suite)
from modstream.model import ModelConfig

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300

task = SyntheticTaskConfig()
configs = default_baselines(ModelConfig(vocab=task.vocab_size, V=task.V))
print("baselines:", ", ".join(configs))

t0 = time.time()
rows = run_baseline_suite(task, configs, steps, OptimizerConfig(), seed=0, n_eval=4)
print(rows_csv(rows))
print(f"# {steps} steps per config, {time.time() - t0:.0f}s")

# router_precision: share of kept vision tokens that carry the planted event
# symbol. Keeping at random gives signal_positions / V.
print(f"# chance router precision: {task.chance_precision}")
