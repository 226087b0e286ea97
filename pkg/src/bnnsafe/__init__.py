"""Safety verification of Bayesian neural network policies via MILP-checked invariant networks."""

__version__ = "0.1.0"

from .bnn import BnnPolicy, WeightBox, rejection_sample, weight_box
from .environments import make_env, rollout, simulate
from .nn import MlpNetwork, forward

__all__ = [
    "__version__",
    "BnnPolicy",
    "WeightBox",
    "MlpNetwork",
    "forward",
    "weight_box",
    "rejection_sample",
    "make_env",
    "rollout",
    "simulate",
]
