import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bnnsafe.bnn import BnnLayer, BnnPolicy, instantiate, rejection_sample_batch, weight_box
from bnnsafe.encoding import (
    build_phi,
    encode_bnn_interval,
    encode_deterministic_net,
    encode_relu,
    propagate_bounds,
    verify_feedforward,
)
from bnnsafe.milp import MilpProblem, Status, check_feasible, solve
from bnnsafe.nn import MlpNetwork, forward
from bnnsafe.sets import BoxSet, PolyhedronSet, box_complement
from conftest import random_policy


def _interval_policy():
    # hidden weight in [1, 2] (mean 1.5, std 0.5, eps 1), identity head
    return BnnPolicy((BnnLayer([[1.5]], [[0.5]], [0.0], [0.0]), BnnLayer([[1.0]], [[0.0]], [0.0], [0.0])))


def test_bounds_collapse_for_point_input(rng):
    pol = random_policy([3, 5, 2], rng)
    x = rng.normal(size=3)
    b = propagate_bounds(pol, BoxSet(x, x), weight_box(pol, 0.0))
    assert np.allclose(b.post_lo[-1], forward(pol.mean_network(), x), atol=1e-12)
    assert np.allclose(b.post_hi[-1], forward(pol.mean_network(), x), atol=1e-12)


def test_bounds_interval_products():
    pol = _interval_policy()
    b = propagate_bounds(pol, BoxSet([-1.0], [3.0]), weight_box(pol, 1.0))
    # endpoint products: 1*-1, 1*3, 2*-1, 2*3
    assert b.pre_lo[0][0] == pytest.approx(-2.0) and b.pre_hi[0][0] == pytest.approx(6.0)
    assert b.post_lo[0][0] == 0.0 and b.post_hi[0][0] == pytest.approx(6.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), grow=st.floats(0.0, 1.0))
def test_bounds_monotone_in_input_box(seed, grow):
    rng = np.random.default_rng(seed)
    pol = random_policy([2, 4, 2], rng, 0.1)
    box = weight_box(pol, 1.0)
    small = BoxSet([-0.5, -0.2], [0.3, 0.4])
    big = BoxSet(small.lower - grow, small.upper + grow)
    a, b = propagate_bounds(pol, small, box), propagate_bounds(pol, big, box)
    for k in range(2):
        assert np.all(b.pre_lo[k] <= a.pre_lo[k] + 1e-12) and np.all(a.pre_hi[k] <= b.pre_hi[k] + 1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_bounds_are_sound(seed):
    rng = np.random.default_rng(seed)
    pol = random_policy([2, 5, 1], rng, 0.2)
    wbox = weight_box(pol, 2.0)
    ibox = BoxSet([-1.0, -0.5], [0.5, 1.0])
    b = propagate_bounds(pol, ibox, wbox)
    params = rejection_sample_batch(pol, wbox, rng, 200)
    xs = ibox.sample(rng, 200)
    out = np.array([forward(instantiate(pol, p), x) for p, x in zip(params, xs)])
    assert np.all(out >= b.post_lo[-1] - 1e-12) and np.all(out <= b.post_hi[-1] + 1e-12)


def _relu_problem(lo, hi, x_value):
    p = MilpProblem()
    x = p.add_var("in", lo, hi)
    y = p.add_var("out", 0.0, max(hi, 0.0))
    z = encode_relu(p, x, y, lo, hi, "z")
    p.fix(x, x_value)
    return p, y, z


@pytest.mark.parametrize("x_value,expected", [(0.5, 0.5), (-0.5, 0.0)])
def test_relu_gadget_forces_output(x_value, expected):
    for sense in ("max", "min"):
        p, y, z = _relu_problem(-1.0, 1.0, x_value)
        assert z is not None
        p.set_objective({y: 1.0}, sense)
        res = solve(p)
        assert res.status is Status.OPTIMAL and res.value(y) == pytest.approx(expected, abs=1e-9)


def test_relu_gadget_branches():
    # the inactive branch is infeasible for a positive input and vice versa
    for x_value, dead in ((0.5, 0.0), (-0.5, 1.0)):
        p, y, z = _relu_problem(-1.0, 1.0, x_value)
        p.fix(z, dead)
        assert solve(p).status is Status.INFEASIBLE


def test_relu_dead_and_live_neurons_have_no_binary():
    p = MilpProblem()
    x = p.add_var("in", -1.0, -0.2)
    y = p.add_var("out", 0.0, 1.0)
    assert encode_relu(p, x, y, -1.0, -0.2) is None
    assert not p.binaries
    q = MilpProblem()
    x = q.add_var("in", 0.1, 2.0)
    y = q.add_var("out", 0.0, 2.0)
    assert encode_relu(q, x, y, 0.1, 2.0) is None
    with pytest.raises(ValueError):
        encode_relu(q, x, y, 1.0, 0.0)


def _net_problem(net, box):
    p = MilpProblem()
    xs = p.add_vars("x", box.lower, box.upper)
    enc = encode_deterministic_net(p, net, xs, box)
    return p, xs, enc


def test_deterministic_encoding_is_exact():
    rng = np.random.default_rng(21)
    for _ in range(20):
        net = MlpNetwork.random([3, 6, 4, 2], rng)
        box = BoxSet(-np.ones(3), np.ones(3))
        point = box.sample(rng, 1)[0]
        expected = forward(net, point)
        for j in range(2):
            for sense in ("max", "min"):
                p, xs, enc = _net_problem(net, box)
                for v, val in zip(xs, point):
                    p.fix(v, val)
                p.set_objective({enc.outputs[j]: 1.0}, sense)
                res = solve(p, backend="highs")
                assert res.objective == pytest.approx(expected[j], abs=1e-6)


def test_zero_network_output_is_zero():
    net = MlpNetwork.zeros([2, 3, 1])
    box = BoxSet([-1, -1], [1, 1])
    for sense in ("max", "min"):
        p, _, enc = _net_problem(net, box)
        p.set_objective({enc.outputs[0]: 1.0}, sense)
        assert solve(p).objective == pytest.approx(0.0, abs=1e-9)


def test_network_maximum_between_grid_and_interval_bound():
    net = MlpNetwork.random([2, 4, 1], np.random.default_rng(8))
    box = BoxSet([-1, -1], [1, 1])
    p, _, enc = _net_problem(net, box)
    p.set_objective({enc.outputs[0]: 1.0}, "max")
    best = solve(p).objective
    grid = forward(net, box.grid(50))[:, 0].max()
    upper = propagate_bounds(net, box).post_hi[-1][0]
    assert grid - 1e-9 <= best <= upper + 1e-9


def _bnn_output_range(pol, wbox, x_value):
    lo_hi = []
    for sense in ("min", "max"):
        p = MilpProblem()
        x = p.add_vars("x", [x_value], [x_value])
        enc = encode_bnn_interval(p, pol, wbox, x, BoxSet([x_value], [x_value]))
        p.set_objective({enc.outputs[0]: 1.0}, sense)
        lo_hi.append(solve(p).objective)
    return lo_hi


def test_interval_encoding_with_zero_eps_is_mean_network(rng):
    pol = random_policy([2, 5, 1], rng, 0.1)
    wbox = weight_box(pol, 0.0)
    point = np.array([0.3, -0.6])
    for sense in ("min", "max"):
        p = MilpProblem()
        x = p.add_vars("x", point, point)
        enc = encode_bnn_interval(p, pol, wbox, x, BoxSet(point, point))
        p.set_objective({enc.outputs[0]: 1.0}, sense)
        assert solve(p).objective == pytest.approx(forward(pol.mean_network(), point)[0], abs=1e-6)


def test_interval_encoding_affine_corners():
    pol = BnnPolicy((BnnLayer([[1.0]], [[0.5]], [0.0], [0.5]),))
    lo, hi = _bnn_output_range(pol, weight_box(pol, 1.0), 1.0)
    assert lo == pytest.approx(0.0, abs=1e-9) and hi == pytest.approx(2.0, abs=1e-9)


def test_interval_encoding_negative_input_matches_corners():
    mu_w, mu_b, half = 0.7, -0.2, 0.3
    pol = BnnPolicy((BnnLayer([[mu_w]], [[half]], [mu_b], [half]),))
    wbox = weight_box(pol, 1.0)
    lo, hi = _bnn_output_range(pol, wbox, -1.0)
    corners = [w * -1.0 + b for w, b in itertools.product([mu_w - half, mu_w + half], [mu_b - half, mu_b + half])]
    assert lo == pytest.approx(min(corners), abs=1e-9) and hi == pytest.approx(max(corners), abs=1e-9)
    # inner approximation: sampled weights stay inside and approach both ends
    draws = rejection_sample_batch(pol, wbox, np.random.default_rng(0), 10_000)
    vals = -draws[:, 0] + draws[:, 1]
    assert vals.min() >= lo - 1e-12 and vals.max() <= hi + 1e-12
    assert vals.min() - lo < 0.1 and hi - vals.max() < 0.1


def _toy_phi_policy():
    # y = 0.8 relu(x) + 0.3 relu(-x); on [0, 1] the maximum is 0.8
    net = MlpNetwork(([[1.0], [-1.0]], [[0.8, 0.3]]), ([0.0, 0.0], [0.0]))
    return BnnPolicy.from_network(net, 0.05)


def test_phi_infeasible_when_output_cannot_reach_unsafe():
    pol = _toy_phi_policy()
    grid = np.linspace(0, 1, 1000)[:, None]
    assert forward(pol.mean_network(), grid).max() == pytest.approx(0.8)
    prob, _ = build_phi(pol, BoxSet([0.0], [1.0]), PolyhedronSet.at_least(1, 0, 2.0), weight_box(pol, 0.0))
    assert solve(prob).status is Status.INFEASIBLE


def test_phi_witness_replays_into_unsafe_set():
    pol = _toy_phi_policy()
    wbox = weight_box(pol, 0.0)
    prob, vs = build_phi(pol, BoxSet([0.0], [1.0]), PolyhedronSet.at_least(1, 0, 0.5), wbox)
    res = solve(prob)
    assert res.status is Status.OPTIMAL
    x0 = res.value(vs.x0)
    assert forward(pol.mean_network(), x0)[0] >= 0.5 - 1e-5


def test_phi_infeasible_above_interval_bound(rng):
    pol = random_policy([2, 4, 1], rng, 0.1)
    wbox = weight_box(pol, 2.0)
    x0 = BoxSet([-1, -1], [1, 1])
    top = propagate_bounds(pol, x0, wbox).post_hi[-1][0]
    prob, _ = build_phi(pol, x0, PolyhedronSet.at_least(1, 0, top + 0.1), wbox)
    assert solve(prob).status is Status.INFEASIBLE


def _feedforward_case(seed):
    rng = np.random.default_rng(seed)
    pol = random_policy([2, 4, 1], rng, 0.1)
    x0 = BoxSet([-0.5, -0.5], [0.5, 0.5])
    mean_max = forward(pol.mean_network(), x0.grid(30))[:, 0].max()
    unsafe = PolyhedronSet.at_least(1, 0, mean_max + 0.05)
    return rng, pol, x0, unsafe


@pytest.mark.parametrize("seed", range(6))
def test_feedforward_verdicts_sound_and_witnesses_valid(seed):
    rng, pol, x0, unsafe = _feedforward_case(seed)
    for eps in (0.0, 0.5, 2.0):
        wbox = weight_box(pol, eps)
        verdict = verify_feedforward(pol, x0, unsafe, wbox)
        if verdict.status == "safe":
            params = rejection_sample_batch(pol, wbox, rng, 2000)
            xs = x0.sample(rng, 2000)
            outs = np.array([forward(instantiate(pol, p), x) for p, x in zip(params, xs)])
            assert not np.any(unsafe.contains(outs))
        else:
            assert verdict.status == "unsafe"
            assert verdict.residual <= 1e-6
            assert wbox.contains(verdict.weights)
            assert x0.contains(verdict.x0, tol=1e-6)
            assert unsafe.contains(verdict.replay_output, tol=1e-5)


@pytest.mark.parametrize("seed", range(4))
def test_phi_feasibility_monotone_in_eps(seed):
    _, pol, x0, unsafe = _feedforward_case(seed)
    flags = [verify_feedforward(pol, x0, unsafe, weight_box(pol, e)).status == "unsafe" for e in (0.0, 0.5, 1.0, 2.0, 4.0)]
    # once feasible, always feasible
    assert flags == sorted(flags)


def test_feedforward_with_union_unsafe_set(rng):
    pol = random_policy([2, 3, 2], rng, 0.1)
    verdict = verify_feedforward(pol, BoxSet([-0.1, -0.1], [0.1, 0.1]), box_complement([-50, -50], [50, 50]),
                                 weight_box(pol, 1.0))
    assert verdict.status == "safe" and len(verdict.results) == 4


def test_encoding_residuals_are_small(rng):
    pol = random_policy([2, 6, 1], rng, 0.2)
    wbox = weight_box(pol, 1.5)
    prob, _ = build_phi(pol, BoxSet([-1, -1], [1, 1]), PolyhedronSet.at_least(1, 0, -100.0), wbox)
    prob.set_objective({prob.num_vars - 1: 1.0}, "max")
    res = solve(prob)
    assert check_feasible(prob, res.x)[1] <= 1e-6
