"""Safe-exploration policy improvement inside a certified weight box.

Each iteration collects rollouts with rejection sampling restricted to the
certified box, estimates a REINFORCE gradient for the mean parameters and
projects the updated means back into ``[mu_prev - eps*sigma, mu_prev + eps*sigma]``.
Standard deviations never change.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .bnn import BnnPolicy, WeightBox, batched_backprop, weight_box
from .environments import BatchRollout, Environment, simulate

__all__ = [
    "SerlConfig",
    "SerlRecord",
    "SerlResult",
    "collect_safe_rollouts",
    "policy_gradient",
    "serl_step",
    "run_serl",
    "evaluate_policy",
]


@dataclass
class SerlConfig:
    iterations: int = 50
    learning_rate: float = 1e-2
    rollouts_per_iter: int = 64
    horizon: int = 50
    gamma: float = 0.99
    recertify: bool = False
    exploration_std: float = 0.1
    estimator: str = "action"
    max_draws: int = 1000

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.estimator not in ("action", "parameter"):
            raise ValueError("estimator must be 'action' or 'parameter'")
        if self.estimator == "action" and not self.exploration_std > 0:
            raise ValueError("the action estimator needs exploration_std > 0")


@dataclass
class SerlRecord:
    iteration: int
    mean_return: float
    unsafe_count: int
    projection_clips: int
    max_displacement: float
    eps_scale: float
    within_box: bool = True


@dataclass
class SerlResult:
    policy: BnnPolicy
    records: list[SerlRecord] = field(default_factory=list)
    left_certified_box: bool = False

    def curve_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["iteration", "mean_return", "unsafe_count", "projection_clips"])
        for r in self.records:
            writer.writerow([r.iteration, repr(r.mean_return), r.unsafe_count, r.projection_clips])
        return buf.getvalue()

    def report(self) -> dict:
        return {
            "iterations": len(self.records),
            "records": [r.__dict__ for r in self.records],
            "left_certified_box": self.left_certified_box,
            "note": "with recertify disabled, updated means stay inside the previous box but the new box "
                    "around them is not itself certified",
        }


def collect_safe_rollouts(env: Environment, policy: BnnPolicy, box: WeightBox, cfg: SerlConfig,
                          rng: np.random.Generator) -> BatchRollout:
    """Rejection-sampled rollouts from random initial states; parameters are kept for the gradient."""
    x0 = env.sample_states(env.initial_set, rng, cfg.rollouts_per_iter)
    noise = cfg.exploration_std if cfg.estimator == "action" else 0.0
    return simulate(env, policy, box, rng, x0, cfg.horizon, cfg.max_draws, keep_params=True, action_noise=noise)


def policy_gradient(policy: BnnPolicy, batch: BatchRollout, cfg: SerlConfig) -> np.ndarray:
    """REINFORCE estimate of the gradient of the mean discounted return in the mean parameters.

    The baseline is the batch mean return. With the ``action`` estimator the
    score is that of a Gaussian with std ``exploration_std`` around the network
    output; with ``parameter`` it is the score of the sampled weights, which for
    a box centred on the means is ``(w - mu) / sigma**2``.
    """
    returns = batch.returns(cfg.gamma)
    adv = returns - returns.mean()
    n, horizon = batch.rewards.shape
    mask = np.arange(horizon)[None, :] < batch.lengths[:, None]
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return np.zeros(policy.num_params)
    params = batch.params[rows, cols]
    if cfg.estimator == "action":
        states = batch.states[rows, cols]
        score_out = (batch.actions[rows, cols] - batch.outputs[rows, cols]) / cfg.exploration_std**2
        per_step = batched_backprop(policy, params, states, score_out)
    else:
        sd = policy.std
        inv_var = np.where(sd > 0, 1.0 / np.where(sd > 0, sd, 1.0) ** 2, 0.0)
        per_step = (params - policy.mean) * inv_var
    grad = (adv[rows][:, None] * per_step).sum(axis=0) / n
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite policy gradient")
    return grad


def serl_step(policy: BnnPolicy, box: WeightBox, batch: BatchRollout, cfg: SerlConfig) -> tuple[BnnPolicy, int]:
    """One ascent step on the means followed by projection into ``box``.

    Returns the new policy and the number of coordinates the projection clamped.
    """
    if batch.rewards.shape[0] == 0:
        raise ValueError("empty rollout batch")
    grad = policy_gradient(policy, batch, cfg)
    mu = policy.mean
    proposal = mu + cfg.learning_rate * grad
    projected = np.clip(proposal, box.lower, box.upper)
    clips = int(np.sum(projected != proposal))
    return policy.with_mean(projected), clips


def evaluate_policy(env: Environment, policy: BnnPolicy, box: WeightBox, x0: np.ndarray, horizon: int,
                    gamma: float, rng: np.random.Generator) -> tuple[float, int]:
    """Mean discounted return and number of unsafe trajectories, without exploration noise."""
    batch = simulate(env, policy, box, rng, x0, horizon)
    return float(batch.returns(gamma).mean()), int(batch.unsafe.sum())


def run_serl(env: Environment, policy: BnnPolicy, eps_scale: float, cfg: SerlConfig, rng: np.random.Generator,
             relative: bool = True, recertify_fn=None) -> SerlResult:
    """Run ``cfg.iterations`` projected policy-gradient steps.

    ``eps_scale`` must already be certified for ``policy``. When
    ``cfg.recertify`` is set, ``recertify_fn(policy)`` must return a freshly
    certified scale (or ``None`` to stop early).
    """
    if cfg.recertify and recertify_fn is None:
        raise ValueError("recertify needs a recertify_fn")
    start_box = weight_box(policy, eps_scale, relative)
    result = SerlResult(policy)
    for it in range(1, cfg.iterations + 1):
        if cfg.recertify and it > 1:
            new_eps = recertify_fn(policy)
            if new_eps is None:
                break
            eps_scale = new_eps
        box = weight_box(policy, eps_scale, relative)
        batch = collect_safe_rollouts(env, policy, box, cfg, rng)
        unsafe = batch.visited_unsafe(env)
        new_policy, clips = serl_step(policy, box, batch, cfg)
        disp = float(np.max(np.abs(new_policy.mean - policy.mean))) if policy.num_params else 0.0
        result.records.append(
            SerlRecord(it, float(batch.returns(cfg.gamma).mean()), unsafe, clips, disp, float(eps_scale),
                       bool(box.contains(new_policy.mean)))
        )
        policy = new_policy
        if not cfg.recertify and not start_box.contains(policy.mean):
            result.left_certified_box = True
    result.policy = policy
    return result
