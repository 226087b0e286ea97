"""Benchmark closed-loop systems with executable and MILP-encoded dynamics.

Each environment exposes ``step`` for simulation and ``encode_dynamics`` which
adds constraints tying MILP variables ``(x, u)`` to ``x' = step(x, u)``. The two
must agree exactly; the test-suite checks this on random points.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .bnn import BnnPolicy, RejectionExhausted, WeightBox, batched_forward, rejection_sample_batch
from .encoding import _pad, encode_relu
from .milp import MilpProblem
from .sets import BoxSet, PolyhedronSet, UnionSet, box_complement

__all__ = [
    "clip",
    "angular",
    "encode_pwl",
    "encode_clip",
    "encode_angular",
    "Environment",
    "LinearSystem",
    "InvertedPendulum",
    "CollisionAvoidance",
    "ToySystem",
    "Trajectory",
    "BatchRollout",
    "lds_step",
    "pendulum_step",
    "collision_step",
    "rollout",
    "simulate",
    "monte_carlo_unsafe",
    "make_env",
    "ENVIRONMENTS",
]

HALF_PI = math.pi / 2


def clip(x, z: float = 1.0):
    """``min(z, max(-z, x))``."""
    if z <= 0:
        raise ValueError("clip half-width must be positive")
    return np.clip(x, -z, z) if isinstance(x, np.ndarray) else min(z, max(-z, x))


def angular(x):
    """Piecewise-linear stand-in for ``-sin(x - pi)``: a triangle wave of period 2 pi.

    Arguments are shifted by multiples of 2 pi into ``(pi/2, 5 pi/2]``.
    """
    arr = np.asarray(x, dtype=np.float64)
    k = np.ceil((arr - 5 * HALF_PI) / (2 * math.pi))
    v = arr - 2 * math.pi * k
    # guard round-off at the left edge of the window
    v = np.where(v <= HALF_PI, v + 2 * math.pi, v)
    out = np.where(v > 3 * HALF_PI, (v - 2 * math.pi) / HALF_PI, 2 - v / HALF_PI)
    return float(out) if np.ndim(x) == 0 else out


def encode_pwl(prob: MilpProblem, in_var: int, lo: float, hi: float, fn, breakpoints, name: str):
    """Encode ``out = fn(in)`` for a continuous piecewise-linear ``fn`` on ``[lo, hi]``.

    ``fn(lo) + s0 (in - lo) + sum_k (s_{k+1} - s_k) ReLU(in - bp_k)`` with one
    ReLU gadget per breakpoint strictly inside the interval. Returns
    ``(out_var, out_lo, out_hi)``.
    """
    bps = sorted(b for b in breakpoints if lo < b < hi)
    knots = [lo] + bps + [hi]
    vals = [float(fn(k)) for k in knots]
    slopes = []
    for a, b, fa, fb in zip(knots[:-1], knots[1:], vals[:-1], vals[1:]):
        slopes.append((fb - fa) / (b - a) if b > a else 0.0)
    out_lo, out_hi = _pad(min(vals), max(vals))
    out = prob.add_var(name, out_lo, out_hi)
    expr = {out: 1.0, in_var: -slopes[0]}
    const = vals[0] - slopes[0] * lo
    for k, bp in enumerate(bps):
        t_lo, t_hi = _pad(lo - bp, hi - bp)
        t = prob.add_var(f"{name}.arg[{k}]", t_lo, t_hi)
        prob.add_constraint({t: 1.0, in_var: -1.0}, "==", -bp)
        r = prob.add_var(f"{name}.relu[{k}]", 0.0, t_hi)
        encode_relu(prob, t, r, t_lo, t_hi, f"{name}.z[{k}]")
        expr[r] = expr.get(r, 0.0) - (slopes[k + 1] - slopes[k])
    prob.add_constraint(expr, "==", const)
    return out, float(out_lo), float(out_hi)


def encode_clip(prob: MilpProblem, in_var: int, lo: float, hi: float, z: float, name: str):
    """``clip(x, z) = x - ReLU(x - z) + ReLU(-x - z)``; no binaries when ``[lo, hi]`` fits."""
    if -z <= lo and hi <= z:
        return in_var, lo, hi
    return encode_pwl(prob, in_var, lo, hi, lambda v: clip(v, z), (-z, z), name)


def encode_angular(prob: MilpProblem, in_var: int, lo: float, hi: float, name: str):
    first = math.floor((lo - HALF_PI) / math.pi)
    last = math.ceil((hi - HALF_PI) / math.pi)
    bps = [HALF_PI + k * math.pi for k in range(first, last + 1)]
    return encode_pwl(prob, in_var, lo, hi, angular, bps, name)


def _eq(prob, name, terms, const, lo, hi):
    """New variable ``v = sum(c * var) + const`` with bounds ``[lo, hi]``."""
    lo, hi = _pad(lo, hi)
    v = prob.add_var(name, float(lo), float(hi))
    expr = {v: 1.0}
    for var, c in terms:
        expr[var] = expr.get(var, 0.0) - c
    prob.add_constraint(expr, "==", const)
    return v, float(lo), float(hi)


def lds_step(x, y, u):
    uc = clip(u, 1.0)
    y_next = y + 0.2 * uc
    x_next = x + 0.3 * y_next + 0.05 * uc
    return x_next, y_next


PENDULUM = dict(g=9.81, l=1.0, dt=0.05, m=0.8)


def pendulum_step(theta, theta_dot, u, gravity_dt: bool = False):
    g, l, dt, m = PENDULUM["g"], PENDULUM["l"], PENDULUM["dt"], PENDULUM["m"]
    grav = -3 * g * angular(theta + math.pi) / (2 * l)
    if gravity_dt:
        grav = grav * dt
    theta_dot_next = clip(theta_dot + grav + dt * 7.5 * clip(u, 1.0) / (m * l**2), 8.0)
    return theta + theta_dot_next * dt, theta_dot_next


COLLISION_ACTIONS = (-1, 0, 1)


def collision_step(p_x, a_x, a_y, u):
    if u not in COLLISION_ACTIONS:
        raise ValueError(f"collision action must be one of {COLLISION_ACTIONS}, got {u}")
    return p_x + u, a_x, a_y - 1


@dataclass
class Environment:
    """A closed-loop benchmark.

    ``terminal_below`` maps a state coordinate to a threshold below which the
    episode is over; such states are absorbing and never unsafe.
    """

    name: str
    state_dim: int
    policy_output_dim: int
    state_box: BoxSet
    initial_set: BoxSet
    unsafe_set: UnionSet
    terminal_below: dict = field(default_factory=dict)
    integer_states: bool = False

    # -- simulation -----------------------------------------------------------------
    def step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def action(self, outputs: np.ndarray) -> np.ndarray:
        """Map policy outputs (rows) to actions fed to :meth:`step`."""
        return np.asarray(outputs, dtype=np.float64)

    def reward(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return -np.sum(x**2, axis=1)

    def is_unsafe(self, x) -> np.ndarray | bool:
        return self.unsafe_set.contains(x)

    def is_initial(self, x) -> np.ndarray | bool:
        return self.initial_set.contains(x)

    def is_terminal(self, x) -> np.ndarray | bool:
        x = np.asarray(x, dtype=np.float64)
        out = np.zeros(x.shape[:-1], dtype=bool)
        for k, thr in self.terminal_below.items():
            out |= x[..., k] < thr
        return bool(out) if x.ndim == 1 else out

    def sample_states(self, region, rng: np.random.Generator, n: int) -> np.ndarray:
        if isinstance(region, BoxSet):
            pts = region.sample(rng, n)
        else:
            pts = region.sample(rng, n, within=self.state_box)
        return pts

    # -- MILP encoding ----------------------------------------------------------------
    def encode_action(self, prob: MilpProblem, out_vars, out_lo, out_hi, prefix="act"):
        """Return ``(u_vars, u_lo, u_hi)``; continuous actions pass straight through."""
        return list(out_vars), np.asarray(out_lo, float), np.asarray(out_hi, float)

    def encode_dynamics(self, prob: MilpProblem, x_vars, x_box: BoxSet, u_vars, u_lo, u_hi, prefix="f"):
        """Add ``x' = step(x, u)``; returns ``(next_vars, next_lo, next_hi)``."""
        raise NotImplementedError


class LinearSystem(Environment):
    """Unstable double-integrator-like linear system with clipped input."""

    def __init__(self, state_box=None):
        super().__init__(
            name="lds",
            state_dim=2,
            policy_output_dim=1,
            state_box=state_box or BoxSet([-1.3, -1.3], [1.3, 1.3]),
            initial_set=BoxSet([-0.6, -0.6], [0.6, 0.6]),
            unsafe_set=box_complement([-1.2, -1.2], [1.2, 1.2]),
        )

    def step(self, x, u):
        x = np.atleast_2d(x)
        u = np.asarray(u, dtype=np.float64).reshape(x.shape[0], -1)[:, 0]
        xn, yn = lds_step(x[:, 0], x[:, 1], u)
        return np.stack([xn, yn], axis=1)

    def encode_dynamics(self, prob, x_vars, x_box, u_vars, u_lo, u_hi, prefix="f"):
        uc, uc_lo, uc_hi = encode_clip(prob, u_vars[0], float(u_lo[0]), float(u_hi[0]), 1.0, f"{prefix}.uc")
        y_lo = x_box.lower[1] + 0.2 * uc_lo
        y_hi = x_box.upper[1] + 0.2 * uc_hi
        yn, y_lo, y_hi = _eq(prob, f"{prefix}.y", [(x_vars[1], 1.0), (uc, 0.2)], 0.0, y_lo, y_hi)
        xl = x_box.lower[0] + 0.3 * y_lo + 0.05 * uc_lo
        xh = x_box.upper[0] + 0.3 * y_hi + 0.05 * uc_hi
        xn, xl, xh = _eq(prob, f"{prefix}.x", [(x_vars[0], 1.0), (yn, 0.3), (uc, 0.05)], 0.0, xl, xh)
        return [xn, yn], np.array([xl, y_lo]), np.array([xh, y_hi])


class InvertedPendulum(Environment):
    """Pendulum with piecewise-linear gravity and clipped torque.

    ``gravity_dt=False`` follows the published update literally, where the
    gravity term is not scaled by the time step; ``True`` scales it by ``dt``.
    """

    def __init__(self, gravity_dt: bool = False, state_box=None):
        super().__init__(
            name="pendulum",
            state_dim=2,
            policy_output_dim=1,
            state_box=state_box or BoxSet([-1.0, -2.2], [1.0, 2.2]),
            initial_set=BoxSet([-math.pi / 6, -0.2], [math.pi / 6, 0.2]),
            unsafe_set=box_complement([-0.9, -2.0], [0.9, 2.0]),
        )
        self.gravity_dt = gravity_dt

    def step(self, x, u):
        x = np.atleast_2d(x)
        u = np.asarray(u, dtype=np.float64).reshape(x.shape[0], -1)[:, 0]
        th, thd = pendulum_step(x[:, 0], x[:, 1], u, self.gravity_dt)
        return np.stack([th, thd], axis=1)

    def encode_dynamics(self, prob, x_vars, x_box, u_vars, u_lo, u_hi, prefix="f"):
        g, l, dt, m = PENDULUM["g"], PENDULUM["l"], PENDULUM["dt"], PENDULUM["m"]
        c_grav = -3 * g / (2 * l) * (dt if self.gravity_dt else 1.0)
        c_u = dt * 7.5 / (m * l**2)
        th, thd = x_vars
        v, v_lo, v_hi = _eq(prob, f"{prefix}.shift", [(th, 1.0)], math.pi,
                            x_box.lower[0] + math.pi, x_box.upper[0] + math.pi)
        ang, a_lo, a_hi = encode_angular(prob, v, v_lo, v_hi, f"{prefix}.ang")
        uc, uc_lo, uc_hi = encode_clip(prob, u_vars[0], float(u_lo[0]), float(u_hi[0]), 1.0, f"{prefix}.uc")
        g_lo, g_hi = sorted((c_grav * a_lo, c_grav * a_hi))
        w_lo = x_box.lower[1] + g_lo + c_u * uc_lo
        w_hi = x_box.upper[1] + g_hi + c_u * uc_hi
        w, w_lo, w_hi = _eq(prob, f"{prefix}.w", [(thd, 1.0), (ang, c_grav), (uc, c_u)], 0.0, w_lo, w_hi)
        thd_n, d_lo, d_hi = encode_clip(prob, w, w_lo, w_hi, 8.0, f"{prefix}.thd")
        th_n, t_lo, t_hi = _eq(prob, f"{prefix}.th", [(th, 1.0), (thd_n, dt)], 0.0,
                               x_box.lower[0] + dt * d_lo, x_box.upper[0] + dt * d_hi)
        return [th_n, thd_n], np.array([t_lo, d_lo]), np.array([t_hi, d_hi])


class CollisionAvoidance(Environment):
    """Agent position ``p_x`` dodging an intruder at ``(a_x, a_y)`` that approaches one step at a time.

    The policy emits three logits; the action is the arg-max mapped to -1, 0, +1.
    By default the collision happens when the intruder arrives (``a_y = 0``);
    ``unsafe_at=5`` reproduces the published literal set.
    """

    def __init__(self, unsafe_at: float = 0.0, state_box=None):
        unsafe = PolyhedronSet(
            np.array([[1.0, -1.0, 0.0], [-1.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]),
            np.array([1.0, 1.0, unsafe_at, -unsafe_at]),
        )
        super().__init__(
            name="collision",
            state_dim=3,
            policy_output_dim=3,
            state_box=state_box or BoxSet([-3.0, -3.0, 0.0], [3.0, 3.0, 5.0]),
            initial_set=BoxSet([-2.0, -2.0, 5.0], [2.0, 2.0, 5.0]),
            unsafe_set=UnionSet((unsafe,)),
            terminal_below={2: 0.0},
            integer_states=True,
        )
        self.unsafe_at = unsafe_at

    def step(self, x, u):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        u = np.asarray(u, dtype=np.float64).reshape(x.shape[0], -1)[:, 0]
        if not np.all(np.isin(u, COLLISION_ACTIONS)):
            raise ValueError(f"collision actions must lie in {COLLISION_ACTIONS}")
        return np.stack([x[:, 0] + u, x[:, 1], x[:, 2] - 1.0], axis=1)

    def action(self, outputs):
        outputs = np.atleast_2d(outputs)
        return (np.argmax(outputs, axis=1) - 1).astype(np.float64)[:, None]

    def reward(self, x, u):
        return np.ones(np.atleast_2d(x).shape[0])

    def sample_states(self, region, rng, n):
        pts = super().sample_states(region, rng, n)
        return np.round(pts)

    def encode_action(self, prob, out_vars, out_lo, out_hi, prefix="act"):
        # one selector per action; the selected logit dominates all others
        sel = [prob.add_binary(f"{prefix}.sel[{k}]") for k in range(3)]
        prob.add_constraint({s: 1.0 for s in sel}, "==", 1.0)
        for j in range(3):
            for k in range(3):
                if j == k:
                    continue
                big_m = max(out_hi[k] - out_lo[j], 0.0) + 1e-6
                # out_j >= out_k - M (1 - sel_j)
                prob.add_constraint({out_vars[j]: 1.0, out_vars[k]: -1.0, sel[j]: -big_m}, ">=", -big_m)
        u = prob.add_var(f"{prefix}.u", -1.0, 1.0)
        prob.add_constraint({u: 1.0, sel[0]: 1.0, sel[2]: -1.0}, "==", 0.0)
        return [u], np.array([-1.0]), np.array([1.0])

    def encode_dynamics(self, prob, x_vars, x_box, u_vars, u_lo, u_hi, prefix="f"):
        p, ax, ay = x_vars
        pn, p_lo, p_hi = _eq(prob, f"{prefix}.p", [(p, 1.0), (u_vars[0], 1.0)], 0.0,
                             x_box.lower[0] + u_lo[0], x_box.upper[0] + u_hi[0])
        axn, ax_lo, ax_hi = _eq(prob, f"{prefix}.ax", [(ax, 1.0)], 0.0, x_box.lower[1], x_box.upper[1])
        ayn, ay_lo, ay_hi = _eq(prob, f"{prefix}.ay", [(ay, 1.0)], -1.0, x_box.lower[2] - 1, x_box.upper[2] - 1)
        return [pn, axn, ayn], np.array([p_lo, ax_lo, ay_lo]), np.array([p_hi, ax_hi, ay_hi])


class ToySystem(Environment):
    """One-dimensional system ``x' = clip(a x + shift + gain u, z)`` for tests and demos.

    With ``gain=0`` the policy has no influence, which makes hand-checked
    invariants easy to write down. ``z=None`` disables the clip.
    """

    def __init__(self, a: float = 0.5, shift: float = 0.0, gain: float = 0.0, z: float | None = 1.0,
                 initial=(-0.1, 0.1), unsafe_beyond: float = 1.0, state_box=None):
        super().__init__(
            name="toy",
            state_dim=1,
            policy_output_dim=1,
            state_box=state_box or BoxSet([-1.5], [1.5]),
            initial_set=BoxSet([initial[0]], [initial[1]]),
            unsafe_set=box_complement([-unsafe_beyond], [unsafe_beyond]),
        )
        self.a, self.shift, self.gain, self.z = float(a), float(shift), float(gain), z

    def step(self, x, u):
        x = np.atleast_2d(x)
        u = np.asarray(u, dtype=np.float64).reshape(x.shape[0], -1)[:, 0]
        v = self.a * x[:, 0] + self.shift + self.gain * u
        return (v if self.z is None else clip(v, self.z))[:, None]

    def encode_dynamics(self, prob, x_vars, x_box, u_vars, u_lo, u_hi, prefix="f"):
        terms = [(x_vars[0], self.a)]
        ends = [self.a * x_box.lower[0], self.a * x_box.upper[0]]
        lo, hi = min(ends) + self.shift, max(ends) + self.shift
        if self.gain != 0.0:
            terms.append((u_vars[0], self.gain))
            g_ends = sorted((self.gain * float(u_lo[0]), self.gain * float(u_hi[0])))
            lo, hi = lo + g_ends[0], hi + g_ends[1]
        v, lo, hi = _eq(prob, f"{prefix}.v", terms, self.shift, lo, hi)
        if self.z is not None:
            v, lo, hi = encode_clip(prob, v, lo, hi, self.z, f"{prefix}.clip")
        return [v], np.array([lo]), np.array([hi])


ENVIRONMENTS = {
    "lds": LinearSystem,
    "pendulum": InvertedPendulum,
    "collision": CollisionAvoidance,
}


def make_env(name: str, **options) -> Environment:
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    return cls(**options)


# -------------------------------------------------------------------------------------
# Rollouts
# -------------------------------------------------------------------------------------


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    in_box: np.ndarray
    safe: bool
    rewards: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        m = self.states.shape[1]
        n = self.actions.shape[1] if self.actions.size else 0
        writer.writerow(["t"] + [f"x{k}" for k in range(m)] + [f"u{k}" for k in range(n)] + ["safe"])
        for t, state in enumerate(self.states):
            act = self.actions[t] if t < len(self.actions) else [""] * n
            writer.writerow([t] + [repr(float(v)) for v in state] + [a if a == "" else repr(float(a)) for a in act]
                            + [int(self.safe)])
        return buf.getvalue()


@dataclass
class BatchRollout:
    """``N`` simulated trajectories padded to the horizon.

    Finished trajectories repeat their last state up to the horizon.
    """

    states: np.ndarray
    actions: np.ndarray
    outputs: np.ndarray
    rewards: np.ndarray
    lengths: np.ndarray
    unsafe: np.ndarray
    params: np.ndarray | None = None

    def returns(self, gamma: float = 1.0) -> np.ndarray:
        disc = gamma ** np.arange(self.rewards.shape[1])
        return (self.rewards * disc).sum(axis=1)

    def visited_unsafe(self, env: Environment) -> int:
        count = 0
        for n, length in enumerate(self.lengths):
            count += int(np.any(env.is_unsafe(self.states[n, : length + 1])))
        return count


def simulate(env: Environment, policy: BnnPolicy, box: WeightBox, rng: np.random.Generator, x0: np.ndarray,
             horizon: int, max_draws: int = 1000, keep_params: bool = False,
             action_noise: float = 0.0) -> BatchRollout:
    """Vectorised rejection-sampled rollouts from each row of ``x0``.

    A fresh weight vector inside ``box`` is drawn for every trajectory and every
    step. Trajectories freeze when they enter the unsafe set or a terminal state.
    ``action_noise > 0`` adds Gaussian exploration noise to the network outputs
    before they are mapped to actions; ``actions`` then records the noisy values.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    x = np.atleast_2d(np.asarray(x0, dtype=np.float64)).copy()
    n = x.shape[0]
    states = np.zeros((n, horizon + 1, env.state_dim))
    states[:, 0] = x
    outputs = np.zeros((n, horizon, policy.output_dim))
    actions = np.zeros((n, horizon, policy.output_dim if action_noise > 0 else 1))
    rewards = np.zeros((n, horizon))
    lengths = np.zeros(n, dtype=int)
    params_log = np.zeros((n, horizon, policy.num_params)) if keep_params else None
    unsafe = np.asarray(env.is_unsafe(x), dtype=bool).copy()
    alive = ~unsafe & ~np.asarray(env.is_terminal(x), dtype=bool)
    for t in range(horizon):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        params = rejection_sample_batch(policy, box, rng, idx.size, max_draws)
        out = batched_forward(policy, params, x[idx])
        if action_noise > 0:
            noisy = out + action_noise * rng.standard_normal(out.shape)
            u = env.action(noisy)
            actions[idx, t] = noisy
        else:
            u = env.action(out)
            actions[idx, t] = u
        rewards[idx, t] = env.reward(x[idx], u)
        nxt = env.step(x[idx], u)
        outputs[idx, t] = out
        if keep_params:
            params_log[idx, t] = params
        x[idx] = nxt
        states[idx, t + 1] = nxt
        lengths[idx] = t + 1
        hit = np.asarray(env.is_unsafe(nxt), dtype=bool)
        unsafe[idx] |= hit
        alive[idx] = ~hit & ~np.asarray(env.is_terminal(nxt), dtype=bool)
    for k in range(n):
        states[k, lengths[k] + 1:] = states[k, lengths[k]]
    return BatchRollout(states, actions, outputs, rewards, lengths, unsafe, params_log)


def rollout(env: Environment, policy: BnnPolicy, box: WeightBox, rng: np.random.Generator, horizon: int,
            x0=None, max_draws: int = 1000) -> Trajectory:
    """One rejection-sampled trajectory; stops early when the unsafe set is entered.

    Raises :class:`RejectionExhausted` if no weight draw lands in ``box``.
    """
    if x0 is None:
        x0 = env.sample_states(env.initial_set, rng, 1)[0]
    batch = simulate(env, policy, box, rng, np.asarray(x0)[None, :], horizon, max_draws)
    length = int(batch.lengths[0])
    return Trajectory(
        states=batch.states[0, : length + 1],
        actions=batch.actions[0, :length],
        in_box=np.ones(length, dtype=bool),
        safe=not bool(batch.unsafe[0]),
        rewards=batch.rewards[0, :length],
    )


def monte_carlo_unsafe(env: Environment, policy: BnnPolicy, box: WeightBox, rng: np.random.Generator,
                       n: int, horizon: int, chunk: int = 10000) -> int:
    """Number of rejection-sampled rollouts from random initial states that reach the unsafe set.

    Membership uses the exact set predicates; rollouts are simulated in chunks.
    """
    bad = 0
    done = 0
    while done < n:
        k = min(chunk, n - done)
        x0 = env.sample_states(env.initial_set, rng, k)
        bad += int(simulate(env, policy, box, rng, x0, horizon).unsafe.sum())
        done += k
    return bad
