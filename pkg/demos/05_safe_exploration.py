"""Improving a sluggish controller without leaving the certified weight box.

Starts from the detuned LDS policy, runs projected policy-gradient steps with
rollouts drawn only from the box, and compares returns on shared initial states.
"""

import numpy as np

from bnnsafe.bnn import weight_box
from bnnsafe.environments import make_env
from bnnsafe.serl import SerlConfig, evaluate_policy, run_serl
from bnnsafe.zoo import load_policy

env = make_env("lds")
policy = load_policy("lds_detuned")
eps = 0.5
result = run_serl(env, policy, eps, SerlConfig(iterations=50), np.random.default_rng(8))
print(result.curve_csv().splitlines()[0])
for line in result.curve_csv().splitlines()[1::10]:
    print(line)

x0 = env.sample_states(env.initial_set, np.random.default_rng(80), 1000)
before = evaluate_policy(env, policy, weight_box(policy, eps), x0, 50, 0.99, np.random.default_rng(81))
after = evaluate_policy(env, result.policy, weight_box(result.policy, eps), x0, 50, 0.99, np.random.default_rng(81))
print(f"mean return {before[0]:.3f} -> {after[0]:.3f}; unsafe rollouts {before[1]} -> {after[1]}")
print("means left the initially certified box:", result.left_certified_box)
