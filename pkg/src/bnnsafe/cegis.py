"""Learner/verifier loop for invariant networks certifying a BNN policy on a weight box.

The learner fits a ReLU network ``g`` whose non-negative region should contain
the initial set, avoid the unsafe set and be closed under the closed-loop
dynamics for every weight vector in the box. The verifier either proves all
three properties with MILPs or returns a counterexample, which is fed back as
training data.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .bnn import BnnPolicy, WeightBox, weight_box
from .checks import REPLAY_TOL, Witness, build_check1, build_check2, build_check3, replay_witness
from .encoding import DELTA_STRICT
from .environments import Environment, simulate
from .milp import Status, solve
from .nn import Adam, MlpNetwork, TrainConfig, TrainingDiverged, backprop, forward
from .reporting import config_hash

__all__ = [
    "MODES",
    "SpecDataset",
    "CeDataset",
    "CegisConfig",
    "CegisOutcome",
    "Verdict",
    "EpsSearchResult",
    "ReplayError",
    "loss_total",
    "init_datasets",
    "train_candidate",
    "verify_candidate",
    "run_cegis",
    "eps_search",
    "DEFAULT_SCHEDULE",
    "default_invariant",
]

MODES = ("no_retrain", "spec_init", "bootstrap")
log = logging.getLogger(__name__)

DEFAULT_SCHEDULE = (0.2, 0.5, 1.0, 1.5, 2.0)


class ReplayError(RuntimeError):
    """A solver witness did not survive concrete re-evaluation."""


@dataclass
class SpecDataset:
    """Labelled states: 1 for "should be inside the invariant", 0 for "outside"."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if self.x.shape[0] != self.y.size:
            raise ValueError("states and labels differ in length")
        if not np.all((self.y == 0) | (self.y == 1)):
            raise ValueError("labels must be 0 or 1")

    @classmethod
    def empty(cls, dim: int) -> "SpecDataset":
        return cls(np.zeros((0, dim)), np.zeros(0))

    def __len__(self) -> int:
        return self.y.size

    def add(self, x, label: int) -> None:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        lab = np.full(x.shape[0], float(label))
        self.__init__(np.vstack([self.x, x]), np.concatenate([self.y, lab]))

    def copy(self) -> "SpecDataset":
        return SpecDataset(self.x.copy(), self.y.copy())


@dataclass
class CeDataset:
    """Transition counterexamples ``(x, x')``."""

    x: np.ndarray
    x_next: np.ndarray

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.x_next = np.atleast_2d(np.asarray(self.x_next, dtype=np.float64))
        if self.x.shape != self.x_next.shape:
            raise ValueError("x and x_next must have the same shape")

    @classmethod
    def empty(cls, dim: int) -> "CeDataset":
        return cls(np.zeros((0, dim)), np.zeros((0, dim)))

    def __len__(self) -> int:
        return self.x.shape[0]

    def add(self, x, x_next) -> None:
        self.__init__(np.vstack([self.x, np.atleast_2d(x)]), np.vstack([self.x_next, np.atleast_2d(x_next)]))


@dataclass
class CegisConfig:
    lam: float = 1.0
    init_samples_x0: int = 256
    init_samples_xu: int = 256
    bootstrap_trajectories: int = 512
    bootstrap_horizon: int = 50
    bootstrap_rollouts: int = 1
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=3e-3, epochs=300, batch_size=64))
    retrain: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=3e-2, epochs=10, batch_size=64))
    timeout: float = 600.0
    delta_strict: float = DELTA_STRICT
    mode: str = "bootstrap"
    hidden: int | None = None
    max_iterations: int | None = None
    backend: str = "highs"
    relative_eps: bool = True
    ce_margin: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not self.timeout > 0:
            raise ValueError("timeout must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.ce_margin < 0:
            raise ValueError("ce_margin must be >= 0")
        if self.bootstrap_rollouts < 1:
            raise ValueError("bootstrap_rollouts must be >= 1")
        if self.delta_strict <= 0:
            raise ValueError("delta_strict must be positive")

    @classmethod
    def from_dict(cls, obj: dict) -> "CegisConfig":
        obj = dict(obj)
        for key in ("pretrain", "retrain"):
            if isinstance(obj.get(key), dict):
                obj[key] = TrainConfig(**obj[key])
        return cls(**obj)


@dataclass
class Verdict:
    passed: bool
    witness: Witness | None = None
    timeout: bool = False
    solver_ms: float = 0.0
    problems_solved: int = 0


@dataclass
class CegisOutcome:
    """``status`` is ``safe`` (certified) or ``unsafe`` (not certified within the budget)."""

    status: str
    eps_scale: float
    invariant: MlpNetwork
    spec: SpecDataset
    ce: CeDataset
    iterations: int
    counterexamples: int
    solver_time: float
    runtime: float
    records: list[dict] = field(default_factory=list)
    reason: str = ""
    config_hash: str = ""

    @property
    def safe(self) -> bool:
        return self.status == "safe"

    def certificate(self) -> dict:
        return {
            "status": self.status,
            "eps_scale": self.eps_scale,
            "invariant": self.invariant.to_json(),
            "config_hash": self.config_hash,
        }

    def report(self) -> dict:
        return {
            "status": self.status,
            "eps_scale": self.eps_scale,
            "reason": self.reason,
            "iterations": self.iterations,
            "counterexamples": self.counterexamples,
            "solver_time_s": self.solver_time,
            "runtime_s": self.runtime,
            "records": self.records,
            "certificate": self.certificate(),
        }


# -------------------------------------------------------------------------------------
# Loss
# -------------------------------------------------------------------------------------


def _cls_loss(z: np.ndarray, y: np.ndarray, cls: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample loss and derivative in ``z``. Class 1 means ``z >= 0``."""
    if cls == "zero_one":
        wrong = np.where(y > 0.5, z < 0, z >= 0)
        return wrong.astype(np.float64), np.zeros_like(z)
    if cls == "logistic":
        return np.logaddexp(0.0, z) - z * y, np.exp(-np.logaddexp(0.0, -z)) - y
    raise ValueError(f"unknown classification loss {cls!r}")


def _loss_and_grad(g: MlpNetwork, spec: SpecDataset, ce: CeDataset, lam: float, cls: str, want_grad: bool,
                   margin: float = 0.0):
    total = 0.0
    grad = np.zeros(g.num_params) if want_grad else None
    if len(spec):
        z = forward(g, spec.x)[:, 0]
        loss, dz = _cls_loss(z, spec.y, cls)
        total += float(loss.mean())
        if want_grad:
            grad += backprop(g, spec.x, (dz / len(spec))[:, None])
    if len(ce) and lam > 0:
        zx = forward(g, ce.x)[:, 0]
        zn = forward(g, ce.x_next)[:, 0]
        # a positive margin keeps pushing until g(x) <= -margin or g(x') >= margin
        active = ((zx > -margin) & (zn < margin)).astype(np.float64)
        lx, dx = _cls_loss(zx + margin, np.zeros_like(zx), cls)
        ln, dn = _cls_loss(zn - margin, np.ones_like(zn), cls)
        scale = lam / len(ce)
        total += scale * float(np.sum(active * lx * ln))
        if want_grad:
            # indicators are constants for differentiation
            grad += backprop(g, ce.x, (scale * active * dx * ln)[:, None])
            grad += backprop(g, ce.x_next, (scale * active * lx * dn)[:, None])
    return total, grad


def loss_total(g: MlpNetwork, spec: SpecDataset, ce: CeDataset, lam: float = 1.0, cls: str = "logistic") -> float:
    """Mean classification loss on ``spec`` plus ``lam`` times the mean counterexample loss.

    The counterexample term for a pair ``(x, x')`` is
    ``1[g(x) > 0] 1[g(x') < 0] L(g(x), 0) L(g(x'), 1)``; it is 0 when ``ce`` is empty.
    """
    if len(spec) == 0:
        raise ValueError("spec dataset is empty")
    return _loss_and_grad(g, spec, ce, lam, cls, False)[0]


# -------------------------------------------------------------------------------------
# Data and training
# -------------------------------------------------------------------------------------


def init_datasets(env: Environment, cfg: CegisConfig, rng: np.random.Generator, policy: BnnPolicy | None = None,
                  box: WeightBox | None = None) -> SpecDataset:
    """Samples of X0 labelled 1 and of the unsafe set (inside the state box) labelled 0.

    In bootstrap mode, uniform state-box samples are added, labelled 0 if any of
    ``bootstrap_rollouts`` rejection-sampled rollouts from them reaches the
    unsafe set and 1 otherwise.
    """
    if cfg.init_samples_x0 < 1 or cfg.init_samples_xu < 1:
        raise ValueError("initial sample counts must be >= 1")
    spec = SpecDataset.empty(env.state_dim)
    spec.add(env.sample_states(env.initial_set, rng, cfg.init_samples_x0), 1)
    spec.add(env.sample_states(env.unsafe_set, rng, cfg.init_samples_xu), 0)
    if cfg.mode == "bootstrap":
        if policy is None or box is None:
            raise ValueError("bootstrap mode needs a policy and a weight box")
        starts = env.sample_states(env.state_box, rng, cfg.bootstrap_trajectories)
        reps = np.repeat(starts, cfg.bootstrap_rollouts, axis=0)
        roll = simulate(env, policy, box, rng, reps, cfg.bootstrap_horizon)
        bad = roll.unsafe.reshape(len(starts), cfg.bootstrap_rollouts).any(axis=1)
        spec.add(starts[bad], 0)
        spec.add(starts[~bad], 1)
    return spec


def default_invariant(env: Environment, cfg: CegisConfig, rng: np.random.Generator) -> MlpNetwork:
    hidden = cfg.hidden or (32 if env.name == "collision" else 12)
    return MlpNetwork.random([env.state_dim, hidden, 1], rng)


def train_candidate(g: MlpNetwork, spec: SpecDataset, ce: CeDataset, lam: float, tcfg: TrainConfig,
                    margin: float = 0.0) -> MlpNetwork:
    """Minimise the logistic form of :func:`loss_total` with minibatch Adam.

    Each minibatch of ``spec`` is combined with the full counterexample term.
    ``margin > 0`` shifts the counterexample indicators and losses so that a
    repaired pair keeps a gap of ``margin`` around the decision boundary.
    """
    if len(spec) == 0:
        raise ValueError("spec dataset is empty")
    rng = np.random.default_rng(tcfg.seed)
    opt = Adam.from_config(tcfg)
    params = g.flatten()
    n = len(spec)
    for epoch in range(tcfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            batch = SpecDataset(spec.x[idx], spec.y[idx])
            loss, grad = _loss_and_grad(g, batch, ce, lam, "logistic", True, margin)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            params = opt.step(params, grad)
            g = g.with_params(params)
    return g


# -------------------------------------------------------------------------------------
# Verification
# -------------------------------------------------------------------------------------


def verify_candidate(g: MlpNetwork, env: Environment, policy: BnnPolicy, box: WeightBox,
                     delta: float = DELTA_STRICT, backend: str = "highs", time_limit: float | None = None) -> Verdict:
    """Run check 1 (all disjuncts), then check 2, then check 3; stop at the first witness.

    Witnesses are replayed concretely; a witness that does not replay raises
    :class:`ReplayError` since it would signal an encoding bug.
    """
    if g.input_dim != env.state_dim:
        raise ValueError(f"invariant expects {g.input_dim} inputs, environment has {env.state_dim} states")
    start = time.monotonic()
    deadline = None if time_limit is None else start + time_limit
    solver_s = 0.0
    solved = 0
    stages = [
        lambda: build_check1(g, policy, box, env, env.state_box, delta),
        lambda: build_check2(g, env.initial_set, env.state_box, delta),
        lambda: build_check3(g, env.unsafe_set, env.state_box, delta),
    ]
    for build in stages:
        for check in build():
            remaining = None if deadline is None else max(deadline - time.monotonic(), 1e-3)
            res = solve(check.problem, remaining, backend)
            solver_s += res.runtime
            solved += 1
            if res.status is Status.TIMEOUT and res.x is None:
                return Verdict(False, None, True, 1000 * solver_s, solved)
            if res.x is None:
                continue
            wit = replay_witness(check, res, g, env, policy, box, delta, REPLAY_TOL)
            if not wit.validated:
                raise ReplayError(f"{check.label} witness failed replay: {wit.to_json()}")
            return Verdict(False, wit, False, 1000 * solver_s, solved)
    return Verdict(True, None, False, 1000 * solver_s, solved)


# -------------------------------------------------------------------------------------
# Loop
# -------------------------------------------------------------------------------------


def run_cegis(env: Environment, policy: BnnPolicy, eps_scale: float, cfg: CegisConfig, rng: np.random.Generator,
              g: MlpNetwork | None = None, spec: SpecDataset | None = None) -> CegisOutcome:
    """Alternate training and verification until the candidate passes or time runs out.

    ``g`` and ``spec`` warm-start the loop; otherwise a fresh network is
    pretrained on :func:`init_datasets`. In ``no_retrain`` mode the pretrained
    candidate is verified exactly once.
    """
    if policy.input_dim != env.state_dim or policy.output_dim != env.policy_output_dim:
        raise ValueError("policy dimensions do not match the environment")
    start = time.monotonic()
    box = weight_box(policy, eps_scale, cfg.relative_eps)
    chash = config_hash(cfg)
    ce = CeDataset.empty(env.state_dim)
    if spec is None:
        spec = init_datasets(env, cfg, rng, policy, box)
    else:
        spec = spec.copy()
    if g is None:
        g = default_invariant(env, cfg, rng)
        g = train_candidate(g, spec, ce, cfg.lam, cfg.pretrain)
    records: list[dict] = []
    solver_s = 0.0
    n_ce = 0
    iteration = 0
    retrain_seed = cfg.retrain.seed

    def finish(status, reason):
        return CegisOutcome(status, float(eps_scale), g, spec, ce, iteration, n_ce, solver_s,
                            time.monotonic() - start, records, reason, chash)

    while True:
        iteration += 1
        remaining = cfg.timeout - (time.monotonic() - start)
        if remaining <= 0:
            return finish("unsafe", "timeout")
        verdict = verify_candidate(g, env, policy, box, cfg.delta_strict, cfg.backend, remaining)
        solver_s += verdict.solver_ms / 1000
        record = {
            "iter": iteration,
            "check_fired": None if verdict.witness is None else verdict.witness.kind,
            "witness": None if verdict.witness is None else verdict.witness.to_json(),
            "d_spec": len(spec),
            "d_ce": len(ce),
            "loss": loss_total(g, spec, ce, cfg.lam, "logistic"),
            "solver_ms": verdict.solver_ms,
        }
        records.append(record)
        log.info("eps=%g iter=%d check=%s |spec|=%d |ce|=%d loss=%.4f solver=%.0fms", eps_scale, iteration,
                 record["check_fired"], len(spec), len(ce), record["loss"], verdict.solver_ms)
        if verdict.passed:
            return finish("safe", "all checks infeasible")
        if verdict.timeout:
            return finish("unsafe", "timeout")
        if cfg.mode == "no_retrain":
            return finish("unsafe", f"candidate rejected by {verdict.witness.kind} check; no retraining")
        if cfg.max_iterations is not None and iteration >= cfg.max_iterations:
            return finish("unsafe", "iteration limit")
        wit = verdict.witness
        n_ce += 1
        if wit.kind == "transition":
            ce.add(wit.x, wit.x_next)
        elif wit.kind == "init":
            spec.add(wit.x, 1)
        else:
            # unsafe states and states that can leave the state box belong outside
            spec.add(wit.x, 0)
        retrain_seed += 1
        g = train_candidate(g, spec, ce, cfg.lam, replace(cfg.retrain, seed=retrain_seed), cfg.ce_margin)


@dataclass
class EpsSearchResult:
    entries: list[tuple[float, CegisOutcome]]

    @property
    def largest_safe(self) -> float | None:
        safe = [eps for eps, out in self.entries if out.safe]
        return max(safe) if safe else None

    @property
    def certificate(self) -> CegisOutcome | None:
        safe = [out for _, out in self.entries if out.safe]
        return safe[-1] if safe else None


def eps_search(env: Environment, policy: BnnPolicy, schedule, cfg: CegisConfig, rng: np.random.Generator) -> EpsSearchResult:
    """Certify increasing ``eps`` values, warm-starting from the last success.

    The invariant network and the labelled state dataset carry over; the transition
    counterexamples are reset for each level. Stops at the first failure.
    """
    schedule = [float(e) for e in schedule]
    if any(not np.isfinite(e) for e in schedule) or any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError("schedule must be finite and strictly ascending")
    entries = []
    g, spec = None, None
    for eps in schedule:
        out = run_cegis(env, policy, eps, cfg, rng, g, spec)
        entries.append((eps, out))
        if not out.safe:
            break
        g, spec = out.invariant, out.spec
    return EpsSearchResult(entries)
