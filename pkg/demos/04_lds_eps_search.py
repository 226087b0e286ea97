"""Certifying the shipped LDS policy for growing weight boxes.

Runs the three learner variants on the unstable linear system. This takes tens
of minutes on one core; pass a smaller per-level timeout as the first argument
for a quicker look.
"""

import sys

import numpy as np

from bnnsafe.cegis import CegisConfig, eps_search
from bnnsafe.environments import make_env
from bnnsafe.zoo import load_policy

timeout = float(sys.argv[1]) if len(sys.argv) > 1 else 900.0
env = make_env("lds")
policy = load_policy("lds")
schedule = [0.5, 1.0, 1.5, 2.0]
# a heavier counterexample term keeps the Monte-Carlo labels of bootstrap mode from outvoting it
lam = 50.0

for mode in ("no_retrain", "spec_init", "bootstrap"):
    result = eps_search(env, policy, schedule, CegisConfig(mode=mode, lam=lam, timeout=timeout), np.random.default_rng(0))
    levels = ", ".join(f"{eps}: {o.status} ({o.iterations} it, {o.runtime:.0f}s)" for eps, o in result.entries)
    print(f"{mode:10s} largest certified eps = {result.largest_safe}   [{levels}]")
