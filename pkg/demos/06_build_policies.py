"""Regenerate the shipped policies in ``bnnsafe/data``.

Each policy mean is fitted to a saturated LQR controller while the Bayesian
layer is perturbed by its own noise, so the mean network is robust to the
weights it will be sampled with.
"""

import sys
from importlib import resources

from bnnsafe.zoo import build_policies

out = sys.argv[1] if len(sys.argv) > 1 else str(resources.files("bnnsafe") / "data")
for path in build_policies(out):
    print("wrote", path)
