"""The three invariant checks as MILPs, and replay of their witnesses.

An invariant candidate ``g`` describes ``Inv = {x in state_box : g(x) >= 0}``.
Check 1 looks for a transition leaving ``Inv``, check 2 for an initial state
outside ``Inv`` and check 3 for an unsafe state inside ``Inv``.

Check 1 is split into disjuncts. The ``transition`` disjunct keeps ``x'`` inside
the state box, where ``g(x')`` is encoded. Each ``escape`` disjunct asks whether
``x'`` can leave the box through one face; the box is the only region the
encodings cover, so leaving it counts as a violation. Faces that lead into
terminal states are exempt.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bnn import BnnPolicy, WeightBox, instantiate
from .encoding import (
    DELTA_STRICT,
    EncodedNet,
    _pad,
    add_membership,
    bounding_box,
    encode_bnn_interval,
    encode_deterministic_net,
)
from .milp import MilpProblem, MilpResult, check_feasible
from .nn import MlpNetwork, forward
from .sets import BoxSet, PolyhedronSet, StateSet, as_parts

__all__ = [
    "REPLAY_TOL",
    "CheckProblem",
    "Witness",
    "build_check1",
    "build_check2",
    "build_check3",
    "replay_witness",
]

REPLAY_TOL = 1e-5


@dataclass
class CheckProblem:
    """One conjunctive MILP belonging to a check.

    ``kind`` is ``transition``, ``escape``, ``init`` or ``unsafe``.
    """

    kind: str
    label: str
    problem: MilpProblem
    x: list[int]
    y: int
    xn: list[int] = field(default_factory=list)
    yn: int | None = None
    u: list[int] = field(default_factory=list)
    policy_enc: EncodedNet | None = None


@dataclass
class Witness:
    kind: str
    label: str
    x: np.ndarray
    x_next: np.ndarray | None
    g_x: float
    g_next: float | None
    residual: float
    validated: bool
    params: np.ndarray | None = None
    action: np.ndarray | None = None

    def to_json(self) -> dict:
        out = {
            "kind": self.kind,
            "label": self.label,
            "x": self.x.tolist(),
            "g_x": self.g_x,
            "residual": self.residual,
            "validated": self.validated,
        }
        if self.x_next is not None:
            out["x_next"] = self.x_next.tolist()
            out["g_next"] = self.g_next
        if self.action is not None:
            out["action"] = self.action.tolist()
        return out


def _encode_g(prob, g, x_vars, region: BoxSet, prefix):
    enc = encode_deterministic_net(prob, g, x_vars, region, prefix=prefix)
    return enc.outputs[0]


def _check_dims(g: MlpNetwork, env) -> None:
    if g.input_dim != env.state_dim or g.output_dim != 1:
        raise ValueError(f"invariant network must map R^{env.state_dim} -> R, got {g.layer_sizes}")


def _closed_loop(prob: MilpProblem, env, policy: BnnPolicy, box: WeightBox, state_box: BoxSet):
    """Shared part of every check-1 disjunct: ``x``, ``u = pi(x)``, ``x' = f(x, u)``."""
    x = prob.add_vars("x", *_pad(state_box.lower, state_box.upper))
    enc = encode_bnn_interval(prob, policy, box, x, state_box, prefix="pi")
    out_lo = enc.bounds.post_lo[-1]
    out_hi = enc.bounds.post_hi[-1]
    u, u_lo, u_hi = env.encode_action(prob, enc.outputs, out_lo, out_hi, prefix="act")
    xn, n_lo, n_hi = env.encode_dynamics(prob, x, state_box, u, u_lo, u_hi, prefix="f")
    return x, enc, u, np.asarray(n_lo, float), np.asarray(n_hi, float), xn


def build_check1(g: MlpNetwork, policy: BnnPolicy, box: WeightBox, env, state_box: BoxSet | None = None,
                 delta: float = DELTA_STRICT) -> list[CheckProblem]:
    """Disjuncts of "some ``x`` in Inv steps to some ``x'`` outside Inv" for weights in ``box``.

    The transition disjunct maximises ``g(x) - g(x')`` subject to ``g(x) >= 0``,
    ``g(x') <= -delta`` and ``x, x'`` in the state box. Disjuncts whose
    constraints are trivially contradictory by interval bounds are omitted.
    """
    _check_dims(g, env)
    state_box = env.state_box if state_box is None else state_box
    terminal = dict(getattr(env, "terminal_below", {}))
    out = []

    prob = MilpProblem("check1.transition")
    x, enc, u, n_lo, n_hi, xn = _closed_loop(prob, env, policy, box, state_box)
    region = BoxSet(n_lo, n_hi).intersect(state_box)
    if region is not None:
        for k, v in enumerate(xn):
            prob.add_constraint({v: 1.0}, "<=", state_box.upper[k])
            prob.add_constraint({v: 1.0}, ">=", state_box.lower[k])
        y = _encode_g(prob, g, x, state_box, "gx")
        yn = _encode_g(prob, g, xn, region, "gxn")
        prob.add_constraint({y: 1.0}, ">=", 0.0)
        prob.add_constraint({yn: 1.0}, "<=", -delta)
        prob.set_objective({y: 1.0, yn: -1.0}, "max")
        out.append(CheckProblem("transition", "transition", prob, x, y, xn, yn, u, enc))

    for k in range(env.state_dim):
        for side in ("upper", "lower"):
            if side == "upper":
                if n_hi[k] < state_box.upper[k] + delta:
                    continue
            else:
                if n_lo[k] > state_box.lower[k] - delta:
                    continue
                if k in terminal and terminal[k] >= state_box.lower[k]:
                    continue
            prob = MilpProblem(f"check1.escape.{k}.{side}")
            x, enc, u, _, _, xn = _closed_loop(prob, env, policy, box, state_box)
            if side == "upper":
                prob.add_constraint({xn[k]: 1.0}, ">=", state_box.upper[k] + delta)
            else:
                prob.add_constraint({xn[k]: 1.0}, "<=", state_box.lower[k] - delta)
            y = _encode_g(prob, g, x, state_box, "gx")
            prob.add_constraint({y: 1.0}, ">=", 0.0)
            prob.set_objective({y: 1.0}, "max")
            out.append(CheckProblem("escape", f"escape x{k} {side}", prob, x, y, xn, None, u, enc))
    return out


def _region_problems(g: MlpNetwork, region: StateSet, state_box: BoxSet, kind: str, delta: float):
    out = []
    for d, part in enumerate(as_parts(region)):
        if isinstance(part, BoxSet):
            part = part.as_polyhedron()
        in_box = bounding_box(part, state_box)
        if in_box is None:
            continue
        prob = MilpProblem(f"check.{kind}.{d}")
        x = prob.add_vars("x", *_pad(in_box.lower, in_box.upper))
        add_membership(prob, x, part.intersect(state_box))
        y = _encode_g(prob, g, x, in_box, "gx")
        if kind == "init":
            prob.add_constraint({y: 1.0}, "<=", -delta)
            prob.set_objective({y: -1.0}, "max")
        else:
            prob.add_constraint({y: 1.0}, ">=", 0.0)
            prob.set_objective({y: 1.0}, "max")
        out.append(CheckProblem(kind, f"{kind} part {d}", prob, x, y))
    return out


def build_check2(g: MlpNetwork, x0_set: StateSet, state_box: BoxSet, delta: float = DELTA_STRICT) -> list[CheckProblem]:
    """``x in X0`` with ``g(x) <= -delta``; maximise ``-g(x)``."""
    if g.output_dim != 1:
        raise ValueError("invariant network must have one output")
    return _region_problems(g, x0_set, state_box, "init", delta)


def build_check3(g: MlpNetwork, unsafe: StateSet, state_box: BoxSet, delta: float = DELTA_STRICT) -> list[CheckProblem]:
    """One problem per unsafe disjunct (clipped to the state box): ``g(x) >= 0``; maximise ``g(x)``."""
    if g.output_dim != 1:
        raise ValueError("invariant network must have one output")
    return _region_problems(g, unsafe, state_box, "unsafe", delta)


def replay_witness(check: CheckProblem, result: MilpResult, g: MlpNetwork, env=None, policy: BnnPolicy | None = None,
                   box: WeightBox | None = None, delta: float = DELTA_STRICT, tol: float = REPLAY_TOL) -> Witness:
    """Re-evaluate a solver witness with concrete arithmetic.

    For transition and escape witnesses, concrete policy weights inside ``box``
    are rebuilt from the witness's pre-activations, the action is recomputed
    and the environment is stepped. The witness is ``validated`` when every
    recomputed quantity matches the MILP values within ``tol`` and all
    constraint residuals are within ``tol``.
    """
    from .encoding import reconstruct_weights

    _, residual = check_feasible(check.problem, result.x)
    x = result.value(check.x)
    g_x = float(forward(g, x)[0])
    ok = residual <= tol and abs(g_x - result.value(check.y)) <= tol
    if check.kind == "init":
        ok &= g_x <= -delta + tol
        return Witness("init", check.label, x, None, g_x, None, residual, bool(ok))
    if check.kind == "unsafe":
        ok &= g_x >= -tol
        return Witness("unsafe", check.label, x, None, g_x, None, residual, bool(ok))

    pre = [result.value(p) for p in check.policy_enc.pre]
    params = reconstruct_weights(policy, box, x, pre)
    out = forward(instantiate(policy, params), x)
    ok &= bool(box.contains(params))
    ok &= float(np.max(np.abs(out - pre[-1]))) <= tol
    u_milp = result.value(check.u)
    if getattr(env, "integer_states", False) and env.policy_output_dim > 1:
        # discrete action: the MILP may pick any maximiser
        chosen = int(round(u_milp[0])) + 1
        ok &= out[chosen] >= np.max(out) - tol
        u = np.array([float(chosen - 1)])
    else:
        u = out
    x_next = env.step(x, u)[0]
    ok &= float(np.max(np.abs(x_next - result.value(check.xn)))) <= tol
    ok &= g_x >= -tol
    g_next = None
    if check.kind == "transition":
        g_next = float(forward(g, x_next)[0])
        ok &= g_next <= -delta + tol
    return Witness(check.kind, check.label, x, x_next, g_x, g_next, residual, bool(ok), params, u)
