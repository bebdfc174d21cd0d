"""
Comparing distillation objectives over five seeds
=================================================

Runs the same comparison as the acceptance suite: one teacher, then one
student per (mode, seed). Expect 15-20 minutes on a single core.
"""

import logging

from pfskd.experiment import ExperimentConfig, directional_checks, format_table, run_comparison
from pfskd.losses import LossConfig

logging.basicConfig(level=logging.INFO, format="%(message)s")

# the PFS term is O(1) here, so a weight of 1 keeps it on the scale of the cross entropy
cfg = ExperimentConfig(loss=LossConfig(lam=1.0))
result = run_comparison(cfg)

print(format_table(result))
for check, ok in directional_checks(result).items():
    print(f"{'ok  ' if ok else 'FAIL'} {check}")
