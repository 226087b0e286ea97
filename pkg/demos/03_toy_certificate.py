"""Learning a positive invariant for a one-dimensional closed loop.

The plant ``x' = 1.2 x + u`` is unstable on its own; the Bayesian controller
``u ~ -0.5 x`` (last layer Gaussian with std 0.1) stabilises it. The learner
alternates between fitting a small ReLU network g and asking the MILP verifier
for a state inside {g >= 0} whose successor leaves it.
"""

import numpy as np

from bnnsafe.bnn import BnnPolicy, weight_box
from bnnsafe.cegis import CegisConfig, loss_total, run_cegis
from bnnsafe.environments import ToySystem, monte_carlo_unsafe
from bnnsafe.nn import MlpNetwork, TrainConfig, forward

env = ToySystem(a=1.2, gain=1.0, z=None)
controller = MlpNetwork(([[1.0], [-1.0]], [[-0.5, 0.5]]), ([0.0, 0.0], [0.0]))
policy = BnnPolicy.from_network(controller, [0.0, 0.1], [False, True])

cfg = CegisConfig(mode="spec_init", init_samples_x0=64, init_samples_xu=64, hidden=6, timeout=120,
                  retrain=TrainConfig(learning_rate=3e-2, epochs=10))
out = run_cegis(env, policy, 1.0, cfg, np.random.default_rng(1))
print(f"status {out.status} after {out.iterations} iterations, {len(out.ce)} transition counterexamples")
for rec in out.records[:5]:
    print(f"  iter {rec['iter']}: check {rec['check_fired']}, |D_spec| {rec['d_spec']}, |D_ce| {rec['d_ce']}")

xs = np.linspace(-1.5, 1.5, 301)[:, None]
inside = xs[forward(out.invariant, xs)[:, 0] >= 0, 0]
print(f"certified invariant covers [{inside.min():.3f}, {inside.max():.3f}]")
print("zero-one loss on the accumulated data:", loss_total(out.invariant, out.spec, out.ce, cls="zero_one"))
bad = monte_carlo_unsafe(env, policy, weight_box(policy, 1.0), np.random.default_rng(2), 10_000, 100)
print(f"{bad} of 10000 sampled rollouts reach the unsafe set")
