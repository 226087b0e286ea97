"""Mixed-integer encodings of ReLU networks, interval BNNs and safety queries.

Every big-M constant comes from :func:`propagate_bounds` over the region the
encoding is asked to cover, so no hard-coded constants can cut off real
behaviour.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bnn import BnnPolicy, WeightBox, instantiate
from .milp import MilpProblem, MilpResult, Status, check_feasible, solve
from .nn import MlpNetwork, forward
from .sets import BoxSet, PolyhedronSet, StateSet, as_parts

__all__ = [
    "DELTA_STRICT",
    "ActivationBounds",
    "EncodedNet",
    "PhiVars",
    "propagate_bounds",
    "encode_relu",
    "encode_deterministic_net",
    "encode_bnn_interval",
    "add_membership",
    "build_phi",
    "verify_feedforward",
    "FeedforwardVerdict",
    "reconstruct_weights",
    "bounding_box",
]

DELTA_STRICT = 1e-6


def _pad(lo, hi):
    """Widen bounds by a hair so exact-boundary values survive float round-off."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    return lo - 1e-9 * (1.0 + np.abs(lo)), hi + 1e-9 * (1.0 + np.abs(hi))


@dataclass
class ActivationBounds:
    """Per-layer bounds on pre-activations (``x_i^in``) and post-activations (``x_i^out``).

    ``pre[k]`` belongs to layer ``k``'s affine map; for the last layer the
    post-activation equals the pre-activation because the head is affine.
    """

    pre_lo: list[np.ndarray]
    pre_hi: list[np.ndarray]
    post_lo: list[np.ndarray]
    post_hi: list[np.ndarray]

    @property
    def output(self) -> BoxSet:
        return BoxSet(self.post_lo[-1], self.post_hi[-1])


def _interval_matvec(wl, wu, xl, xu):
    products = np.stack([wl * xl, wl * xu, wu * xl, wu * xu])
    return products.min(axis=0).sum(axis=1), products.max(axis=0).sum(axis=1)


def propagate_bounds(model, input_box: BoxSet, weights: WeightBox | None = None) -> ActivationBounds:
    """Interval arithmetic through a network.

    ``model`` is an :class:`MlpNetwork` (point weights) or a :class:`BnnPolicy`
    with an optional :class:`WeightBox`; without a box the policy means are used.
    """
    if isinstance(model, BnnPolicy):
        if weights is None:
            layers = [(w, w, b, b) for w, b in zip(model.mean_network().weights, model.mean_network().biases)]
        else:
            layers = list(weights.layer_slices(model))
    else:
        layers = [(w, w, b, b) for w, b in zip(model.weights, model.biases)]
    xl, xu = input_box.lower.copy(), input_box.upper.copy()
    pre_lo, pre_hi, post_lo, post_hi = [], [], [], []
    last = len(layers) - 1
    for k, (wl, wu, bl, bu) in enumerate(layers):
        if wl is wu:
            c, r = 0.5 * (xl + xu), 0.5 * (xu - xl)
            mid = wl @ c
            rad = np.abs(wl) @ r
            lo, hi = mid - rad + bl, mid + rad + bu
        else:
            lo, hi = _interval_matvec(wl, wu, xl[None, :], xu[None, :])
            lo, hi = lo + bl, hi + bu
        pre_lo.append(lo)
        pre_hi.append(hi)
        if k < last:
            xl, xu = np.maximum(lo, 0.0), np.maximum(hi, 0.0)
        else:
            xl, xu = lo, hi
        post_lo.append(xl)
        post_hi.append(xu)
    return ActivationBounds(pre_lo, pre_hi, post_lo, post_hi)


def encode_relu(prob: MilpProblem, in_var: int, out_var: int, lo: float, hi: float, name: str | None = None) -> int | None:
    """Constrain ``out = max(in, 0)`` given ``lo <= in <= hi``.

    Sign-stable neurons need no binary. Otherwise the big-M gadget
    ``out >= in, out >= 0, out <= in - lo (1 - z), out <= hi z`` is emitted and
    the indicator ``z`` is returned.
    """
    if lo > hi:
        raise ValueError(f"ReLU bounds out of order: {lo} > {hi}")
    if hi <= 0:
        prob.add_constraint({out_var: 1.0}, "==", 0.0)
        return None
    if lo >= 0:
        prob.add_constraint({out_var: 1.0, in_var: -1.0}, "==", 0.0)
        return None
    z = prob.add_binary(name)
    prob.add_constraint({out_var: 1.0, in_var: -1.0}, ">=", 0.0)
    prob.add_constraint({out_var: 1.0}, ">=", 0.0)
    prob.add_constraint({out_var: 1.0, in_var: -1.0, z: -lo}, "<=", -lo)
    prob.add_constraint({out_var: 1.0, z: -hi}, "<=", 0.0)
    return z


@dataclass
class EncodedNet:
    """Variable handles created for one network encoding."""

    inputs: list[int]
    pre: list[list[int]] = field(default_factory=list)
    post: list[list[int]] = field(default_factory=list)
    binaries: list[int] = field(default_factory=list)
    input_pos: list[int | None] = field(default_factory=list)
    bounds: ActivationBounds | None = None

    @property
    def outputs(self) -> list[int]:
        return self.post[-1]


def _relu_layer(prob, pre_vars, lo, hi, prefix, enc):
    lo, hi = _pad(lo, hi)
    outs = prob.add_vars(f"{prefix}.out", np.maximum(lo, 0.0), np.maximum(hi, 0.0))
    for j, (pv, ov) in enumerate(zip(pre_vars, outs)):
        z = encode_relu(prob, pv, ov, lo[j], hi[j], f"{prefix}.z[{j}]")
        if z is not None:
            enc.binaries.append(z)
    return outs


def encode_deterministic_net(prob: MilpProblem, net: MlpNetwork, input_vars, input_box: BoxSet,
                             bounds: ActivationBounds | None = None, prefix: str = "g") -> EncodedNet:
    """Exact encoding of ``outputs = net(inputs)`` for inputs inside ``input_box``."""
    if len(input_vars) != net.input_dim:
        raise ValueError(f"network expects {net.input_dim} inputs, got {len(input_vars)}")
    bounds = propagate_bounds(net, input_box) if bounds is None else bounds
    enc = EncodedNet(list(input_vars), bounds=bounds)
    h = list(input_vars)
    last = net.num_layers - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        lo, hi = _pad(bounds.pre_lo[k], bounds.pre_hi[k])
        pre = prob.add_vars(f"{prefix}.l{k}.in", lo, hi)
        for i, pv in enumerate(pre):
            expr = {hv: w[i, j] for j, hv in enumerate(h) if w[i, j] != 0.0}
            expr[pv] = expr.get(pv, 0.0) - 1.0
            prob.add_constraint(expr, "==", -b[i])
        enc.pre.append(pre)
        if k < last:
            h = _relu_layer(prob, pre, bounds.pre_lo[k], bounds.pre_hi[k], f"{prefix}.l{k}", enc)
        else:
            h = pre
        enc.post.append(h)
    return enc


def encode_bnn_interval(prob: MilpProblem, policy: BnnPolicy, box: WeightBox, input_vars, input_box: BoxSet,
                        bounds: ActivationBounds | None = None, prefix: str = "pi") -> EncodedNet:
    """Encode ``outputs = pi_{w,b}(inputs)`` for *some* ``(w, b)`` in ``box``.

    Hidden layers use the two-sided interval inequalities on non-negative
    ReLU outputs. The input layer splits each input whose sign is unknown into
    ``pos = ReLU(x)`` and ``neg = x - pos`` so the extreme weight corners can be
    paired with the right sign. The output layer is affine.
    """
    if len(input_vars) != policy.input_dim:
        raise ValueError(f"policy expects {policy.input_dim} inputs, got {len(input_vars)}")
    bounds = propagate_bounds(policy, input_box, box) if bounds is None else bounds
    enc = EncodedNet(list(input_vars), bounds=bounds)
    slices = list(box.layer_slices(policy))
    last = len(slices) - 1
    h = list(input_vars)
    for k, (wl, wu, bl, bu) in enumerate(slices):
        mean_w, half_w = 0.5 * (wl + wu), 0.5 * (wu - wl)
        mean_b, half_b = 0.5 * (bl + bu), 0.5 * (bu - bl)
        lo, hi = _pad(bounds.pre_lo[k], bounds.pre_hi[k])
        nxt = prob.add_vars(f"{prefix}.l{k}.in", lo, hi)
        # per input column: linear expressions for the "positive part" coefficient
        if k == 0:
            # (M - E) pos + (M + E) neg  with neg = x - pos  ==  (M + E) x - 2 E pos
            pos_vars: list[int | None] = []
            for j, xv in enumerate(h):
                if not np.any(half_w[:, j] > 0):
                    pos_vars.append(None)
                elif input_box.lower[j] >= 0:
                    pos_vars.append(xv)
                elif input_box.upper[j] <= 0:
                    pos_vars.append(-1)  # input is entirely non-positive: pos == 0
                else:
                    plo, phi = _pad(0.0, max(input_box.upper[j], 0.0))
                    pv = prob.add_var(f"{prefix}.x0pos[{j}]", 0.0, phi)
                    ilo, ihi = _pad(input_box.lower[j], input_box.upper[j])
                    z = encode_relu(prob, xv, pv, ilo, ihi, f"{prefix}.x0pos.z[{j}]")
                    if z is not None:
                        enc.binaries.append(z)
                    pos_vars.append(pv)
            enc.input_pos = pos_vars
        for i, nv in enumerate(nxt):
            if not np.any(half_w[i] > 0) and half_b[i] == 0.0:
                expr = {hv: mean_w[i, j] for j, hv in enumerate(h) if mean_w[i, j] != 0.0}
                expr[nv] = expr.get(nv, 0.0) - 1.0
                prob.add_constraint(expr, "==", -mean_b[i])
                continue
            lower_expr: dict[int, float] = {}
            upper_expr: dict[int, float] = {}
            for j, hv in enumerate(h):
                m, e = mean_w[i, j], half_w[i, j]
                if k > 0:
                    lower_expr[hv] = lower_expr.get(hv, 0.0) + (m - e)
                    upper_expr[hv] = upper_expr.get(hv, 0.0) + (m + e)
                    continue
                pv = enc.input_pos[j]
                if pv is None or e == 0.0:
                    lower_expr[hv] = lower_expr.get(hv, 0.0) + m
                    upper_expr[hv] = upper_expr.get(hv, 0.0) + m
                elif pv == hv:
                    lower_expr[hv] = lower_expr.get(hv, 0.0) + (m - e)
                    upper_expr[hv] = upper_expr.get(hv, 0.0) + (m + e)
                elif pv == -1:
                    lower_expr[hv] = lower_expr.get(hv, 0.0) + (m + e)
                    upper_expr[hv] = upper_expr.get(hv, 0.0) + (m - e)
                else:
                    lower_expr[hv] = lower_expr.get(hv, 0.0) + (m + e)
                    lower_expr[pv] = lower_expr.get(pv, 0.0) - 2 * e
                    upper_expr[hv] = upper_expr.get(hv, 0.0) + (m - e)
                    upper_expr[pv] = upper_expr.get(pv, 0.0) + 2 * e
            # lower_expr + (m - e) <= next <= upper_expr + (m + e)
            lower_expr[nv] = lower_expr.get(nv, 0.0) - 1.0
            prob.add_constraint(lower_expr, "<=", -(mean_b[i] - half_b[i]))
            upper_expr[nv] = upper_expr.get(nv, 0.0) - 1.0
            prob.add_constraint(upper_expr, ">=", -(mean_b[i] + half_b[i]))
        enc.pre.append(nxt)
        if k < last:
            h = _relu_layer(prob, nxt, bounds.pre_lo[k], bounds.pre_hi[k], f"{prefix}.l{k}", enc)
        else:
            h = nxt
        enc.post.append(h)
    return enc


def reconstruct_weights(policy: BnnPolicy, box: WeightBox, x0: np.ndarray, layer_inputs: list[np.ndarray]) -> np.ndarray:
    """Concrete parameters in ``box`` that reproduce a witness's pre-activations.

    ``layer_inputs[k]`` are the witness values of layer ``k``'s pre-activation
    variables. Each neuron's value lies between the images of the two extreme
    weight corners, so interpolating between those corners recovers weights that
    produce it exactly (up to clipping of solver round-off).
    """
    parts = []
    h = np.asarray(x0, dtype=np.float64)
    last = len(policy.layers) - 1
    for k, (wl, wu, bl, bu) in enumerate(box.layer_slices(policy)):
        mean_w, half_w = 0.5 * (wl + wu), 0.5 * (wu - wl)
        mean_b, half_b = 0.5 * (bl + bu), 0.5 * (bu - bl)
        sgn = np.where(h >= 0, 1.0, -1.0) if k == 0 else np.ones_like(h)
        dir_w = half_w * sgn[None, :]
        low = (mean_w - dir_w) @ h + (mean_b - half_b)
        high = (mean_w + dir_w) @ h + (mean_b + half_b)
        target = np.asarray(layer_inputs[k], dtype=np.float64)
        span = high - low
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(span > 1e-300, (target - low) / span, 0.5)
        t = np.clip(t, 0.0, 1.0)
        s = 2 * t - 1
        w = mean_w + s[:, None] * dir_w
        b = mean_b + s * half_b
        w = np.clip(w, wl, wu)
        b = np.clip(b, bl, bu)
        parts.append(w.ravel())
        parts.append(b)
        h = w @ h + b
        if k < last:
            h = np.maximum(h, 0.0)
    return np.concatenate(parts)


def add_membership(prob: MilpProblem, variables, poly: PolyhedronSet | BoxSet) -> None:
    """Constrain ``variables`` to lie in a polyhedron (``A x <= b``)."""
    if isinstance(poly, BoxSet):
        poly = poly.as_polyhedron()
    for row, rhs in zip(poly.A, poly.b):
        expr = {v: c for v, c in zip(variables, row) if c != 0.0}
        if not expr:
            if rhs < 0:
                prob.add_constraint({variables[0]: 0.0}, "<=", rhs)
            continue
        prob.add_constraint(expr, "<=", rhs)


def bounding_box(region: BoxSet | PolyhedronSet, within: BoxSet | None = None) -> BoxSet | None:
    if isinstance(region, BoxSet):
        return region if within is None else region.intersect(within)
    return region.bounding_box(within)


@dataclass
class PhiVars:
    x0: list[int]
    xl: list[int]
    net: EncodedNet


def build_phi(policy: BnnPolicy, x0_set: BoxSet | PolyhedronSet, unsafe_part: PolyhedronSet, box: WeightBox):
    """Constraint system whose feasibility means some ``pi_{w,b}``, ``(w,b)`` in ``box``,
    maps a point of ``x0_set`` into the unsafe disjunct ``unsafe_part``.

    Returns ``(problem, PhiVars)``, or ``(None, None)`` when ``x0_set`` is empty.
    """
    in_box = bounding_box(x0_set)
    if in_box is None:
        return None, None
    prob = MilpProblem("phi")
    x0 = prob.add_vars("x0", *_pad(in_box.lower, in_box.upper))
    add_membership(prob, x0, x0_set)
    enc = encode_bnn_interval(prob, policy, box, x0, in_box)
    add_membership(prob, enc.outputs, unsafe_part)
    prob.set_objective({}, "max")
    return prob, PhiVars(x0, enc.outputs, enc)


@dataclass
class FeedforwardVerdict:
    """Outcome of checking every unsafe disjunct."""

    status: str  # "safe", "unsafe" or "timeout"
    disjunct: int | None = None
    x0: np.ndarray | None = None
    output: np.ndarray | None = None
    weights: np.ndarray | None = None
    replay_output: np.ndarray | None = None
    residual: float | None = None
    results: list[MilpResult] = field(default_factory=list)


def verify_feedforward(policy: BnnPolicy, x0_set: BoxSet | PolyhedronSet, unsafe: StateSet, box: WeightBox,
                       time_limit: float | None = None, backend: str = "native") -> FeedforwardVerdict:
    """Decide whether every network with weights in ``box`` is safe on ``x0_set``.

    Solves one problem per unsafe disjunct; the lowest-index feasible disjunct
    provides the witness, which is replayed through concrete reconstructed weights.
    """
    results = []
    timed_out = False
    for d, part in enumerate(as_parts(unsafe)):
        prob, vs = build_phi(policy, x0_set, part, box)
        if prob is None:
            return FeedforwardVerdict("safe", results=results)
        res = solve(prob, time_limit, backend)
        results.append(res)
        if res.status is Status.TIMEOUT and res.x is None:
            timed_out = True
            continue
        if res.x is not None:
            _, residual = check_feasible(prob, res.x)
            x0 = res.value(vs.x0)
            layer_inputs = [res.value(p) for p in vs.net.pre]
            w = reconstruct_weights(policy, box, x0, layer_inputs)
            replay = forward(instantiate(policy, w), x0)
            return FeedforwardVerdict("unsafe", d, x0, res.value(vs.xl), w, replay, residual, results)
    return FeedforwardVerdict("timeout" if timed_out else "safe", results=results)
