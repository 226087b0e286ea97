"""Feed-forward safety of a Bayesian network: is any output in an unsafe region?

A 2-8-1 network gets Gaussian weights. For growing weight boxes we ask the MILP
whether some input in X0 and some weights in the box push the output above a
threshold, and confirm every verdict by sampling.
"""

import numpy as np

from bnnsafe.bnn import BnnPolicy, batched_forward, rejection_sample_batch, weight_box
from bnnsafe.encoding import verify_feedforward
from bnnsafe.nn import MlpNetwork, forward
from bnnsafe.sets import BoxSet, PolyhedronSet

rng = np.random.default_rng(0)
policy = BnnPolicy.from_network(MlpNetwork.random([2, 8, 1], rng), std=0.1)
x0 = BoxSet([-0.5, -0.5], [0.5, 0.5])
top = forward(policy.mean_network(), x0.grid(50))[:, 0].max()
unsafe = PolyhedronSet.at_least(1, 0, top + 0.2)
print(f"mean network peaks at {top:.3f} on X0; unsafe means output >= {top + 0.2:.3f}")

for eps in (0.0, 0.5, 1.0, 2.0, 4.0):
    box = weight_box(policy, eps)
    verdict = verify_feedforward(policy, x0, unsafe, box, backend="highs")
    line = f"eps = {eps:3.1f} sigma: {verdict.status}"
    if verdict.status == "unsafe":
        line += f" (x0 = {np.round(verdict.x0, 3)}, replayed output {verdict.replay_output[0]:.3f})"
    else:
        params = rejection_sample_batch(policy, box, rng, 20_000)
        outs = batched_forward(policy, params, x0.sample(rng, 20_000))
        line += f" (20000 samples, max output {outs.max():.3f})"
    print(line)
