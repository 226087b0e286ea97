"""Shipped benchmark policies and the routine that produced them.

Policy means are fitted to a reference controller while the Bayesian layers
are perturbed by their own posterior noise (reparameterised sampling), so the
mean network is trained for the distribution it will be sampled from.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from typing import Callable

import numpy as np
import scipy.linalg

from .bnn import BnnPolicy, batched_backprop, batched_forward, sample
from .nn import Adam, MlpNetwork
from .sets import BoxSet

__all__ = ["FitConfig", "lqr_gain", "lds_reference", "fit_bnn_policy", "build_policies", "load_policy", "available_policies",
           "LDS_A", "LDS_B", "SHIPPED"]

# linearisation of the LDS update for |u| <= 1
LDS_A = np.array([[1.0, 0.3], [0.0, 1.0]])
LDS_B = np.array([[0.11], [0.2]])


def lqr_gain(a: np.ndarray, b: np.ndarray, q: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Discrete-time LQR gain ``K`` for ``u = -K x``."""
    p = scipy.linalg.solve_discrete_are(a, b, q, r)
    return np.linalg.solve(r + b.T @ p @ b, b.T @ p @ a)


@dataclass
class FitConfig:
    steps: int = 6000
    batch_size: int = 128
    learning_rate: float = 3e-3
    seed: int = 0


def fit_bnn_policy(sizes, target: Callable[[np.ndarray], np.ndarray], region: BoxSet, std, bayesian,
                   cfg: FitConfig = FitConfig()) -> BnnPolicy:
    """Fit policy means to ``target`` by squared error under sampled posterior noise.

    ``std`` and ``bayesian`` are per-layer as in :meth:`BnnPolicy.from_network`.
    """
    rng = np.random.default_rng(cfg.seed)
    policy = BnnPolicy.from_network(MlpNetwork.random(sizes, rng), std, bayesian)
    opt = Adam(cfg.learning_rate)
    mu = policy.mean
    for _ in range(cfg.steps):
        x = region.sample(rng, cfg.batch_size)
        params = sample(policy, rng, cfg.batch_size)
        err = batched_forward(policy, params, x) - target(x)
        grad = batched_backprop(policy, params, x, 2.0 * err / cfg.batch_size).sum(axis=0)
        mu = opt.step(mu, grad)
        policy = policy.with_mean(mu)
    return policy


def available_policies() -> list[str]:
    files = resources.files("bnnsafe") / "data"
    return sorted(p.name[: -len(".json")] for p in files.iterdir() if p.name.endswith(".json"))


def load_policy(name: str) -> BnnPolicy:
    """Load a shipped policy by name, e.g. ``"lds"``."""
    path = resources.files("bnnsafe") / "data" / f"{name}.json"
    if not path.is_file():
        raise ValueError(f"no shipped policy {name!r}; available: {available_policies()}")
    return BnnPolicy.from_json(json.loads(path.read_text()))


def lds_reference(scale: float = 1.0, r: float = 1.0) -> Callable[[np.ndarray], np.ndarray]:
    """Saturated LQR controller ``clip(-scale K x, 1)`` for the LDS."""
    k = lqr_gain(LDS_A, LDS_B, np.eye(2), np.eye(1) * r)
    return lambda x: np.clip(-scale * np.atleast_2d(x) @ k.T, -1.0, 1.0)


# name -> (sizes, reference, region, std, bayesian); re-run build_policies to regenerate data/
SHIPPED = {
    "lds": ([2, 16, 1], lambda: lds_reference(), BoxSet([-1.3, -1.3], [1.3, 1.3]), [0.0, 0.1], [False, True]),
    "lds_detuned": ([2, 16, 1], lambda: lds_reference(scale=0.5), BoxSet([-1.3, -1.3], [1.3, 1.3]),
                    [0.0, 0.1], [False, True]),
}


def build_policies(out_dir, names=None, cfg: FitConfig = FitConfig()) -> list:
    """Fit and write the shipped policies; returns the written paths."""
    from pathlib import Path

    Path(out_dir).mkdir(parents=True, exist_ok=True)
    out = []
    for name in names or sorted(SHIPPED):
        sizes, ref, region, std, bayesian = SHIPPED[name]
        policy = fit_bnn_policy(sizes, ref(), region, std, bayesian, cfg)
        path = Path(out_dir) / f"{name}.json"
        policy.save(path)
        out.append(path)
    return out
