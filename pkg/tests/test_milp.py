import numpy as np
import pytest

from bnnsafe.milp import MilpProblem, Status, check_feasible, solve, solve_lp
from oracles import enumerate_milp, lp_vertex_enumeration, random_milp


def test_single_bounded_variable():
    p = MilpProblem()
    x = p.add_var("x", 0.0, 3.0)
    p.set_objective({x: 1.0}, "max")
    res = solve(p)
    assert res.status is Status.OPTIMAL
    assert res.value(x) == pytest.approx(3.0) and res.objective == pytest.approx(3.0)


def test_binary_knapsack_enumeration():
    p = MilpProblem()
    x, y = p.add_binary("x"), p.add_binary("y")
    p.add_constraint({x: 1.0, y: 1.0}, "<=", 1.5)
    p.set_objective({x: 1.0, y: 1.0}, "max")
    res = solve(p)
    assert res.status is Status.OPTIMAL and res.objective == pytest.approx(1.0)
    assert res.value(x) + res.value(y) == 1.0


def test_contradictory_bounds_infeasible():
    p = MilpProblem()
    x = p.add_var("x", -10, 10)
    p.add_constraint({x: 1.0}, ">=", 2.0)
    p.add_constraint({x: 1.0}, "<=", 1.0)
    assert solve(p).status is Status.INFEASIBLE
    assert solve(p, backend="highs").status is Status.INFEASIBLE


def test_strict_relations_are_rejected():
    p = MilpProblem()
    x = p.add_var("x", 0, 1)
    with pytest.raises(ValueError, match="strict"):
        p.add_constraint({x: 1.0}, "<", 0.5)


def test_unbounded_variables_are_rejected():
    p = MilpProblem()
    with pytest.raises(ValueError, match="finite"):
        p.add_var("x", 0.0, np.inf)
    with pytest.raises(ValueError):
        p.add_var("y", 2.0, 1.0)


def test_duplicate_names_rejected():
    p = MilpProblem()
    p.add_var("x", 0, 1)
    with pytest.raises(ValueError):
        p.add_var("x", 0, 1)


def test_check_feasible_reports_violation():
    p = MilpProblem()
    x = p.add_var("x", -5, 5)
    p.add_constraint({x: 1.0}, "<=", 1.0)
    ok, viol = check_feasible(p, {"x": 1.5})
    assert not ok and viol == pytest.approx(0.5)
    ok, viol = check_feasible(p, np.array([0.5]))
    assert ok and viol == 0.0
    with pytest.raises(KeyError):
        check_feasible(p, {"y": 0.0})


def test_check_feasible_flags_fractional_binary():
    p = MilpProblem()
    p.add_binary("z")
    ok, viol = check_feasible(p, {"z": 0.4})
    assert not ok and viol == pytest.approx(0.4)


@pytest.mark.parametrize("seed", range(40))
def test_random_milps_match_enumeration(seed):
    rng = np.random.default_rng(seed)
    prob, data = random_milp(rng)
    expected = enumerate_milp(data)
    res = solve(prob)
    if expected is None:
        assert res.status is Status.INFEASIBLE
    else:
        assert res.status is Status.OPTIMAL
        assert res.objective == pytest.approx(expected, abs=1e-6)
        ok, viol = check_feasible(prob, res.x)
        assert ok, viol


@pytest.mark.parametrize("seed", range(15))
def test_backends_agree(seed):
    prob, _ = random_milp(np.random.default_rng(1000 + seed))
    a, b = solve(prob, backend="native"), solve(prob, backend="highs")
    assert a.status is b.status
    if a.status is Status.OPTIMAL:
        assert a.objective == pytest.approx(b.objective, abs=1e-6)
        assert check_feasible(prob, b.x)[0]


@pytest.mark.parametrize("seed", range(25))
def test_lp_matches_vertex_enumeration(seed):
    rng = np.random.default_rng(500 + seed)
    n = int(rng.integers(1, 7))
    m = int(rng.integers(1, 6))
    a = rng.normal(size=(m, n))
    lo = -rng.uniform(0.5, 3, size=n)
    hi = rng.uniform(0.5, 3, size=n)
    b = a @ rng.uniform(lo, hi) + rng.uniform(0, 1, size=m)
    c = rng.normal(size=n)
    expected = lp_vertex_enumeration(c, a, b, lo, hi)
    res = solve_lp(-c, a, -np.ones(m), b, lo, hi)
    assert res.status is Status.OPTIMAL
    assert -res.objective == pytest.approx(expected, abs=1e-8)


def test_solve_is_deterministic():
    prob, _ = random_milp(np.random.default_rng(3), n_bin=8, n_cont=5, n_cons=6)
    r1, r2 = solve(prob), solve(prob)
    assert r1.status is r2.status
    if r1.x is not None:
        assert np.array_equal(r1.x, r2.x)


def test_timeout_is_reported():
    prob, _ = random_milp(np.random.default_rng(4), n_bin=10, n_cont=8, n_cons=8)
    res = solve(prob, time_limit=0.0)
    assert res.status in (Status.TIMEOUT, Status.INFEASIBLE, Status.OPTIMAL)
    if res.status is Status.TIMEOUT and res.x is not None:
        assert check_feasible(prob, res.x)[0]


def test_lp_text_export():
    p = MilpProblem("demo")
    x = p.add_var("x", -1, 2)
    z = p.add_binary("z")
    p.add_constraint({x: 1.0, z: -2.0}, "<=", 0.5, name="link")
    p.set_objective({x: 1.0}, "max")
    text = p.to_lp()
    for token in ("Maximize", "Subject To", "link:", "Bounds", "Binaries", "End", "-1.0 <= x <= 2.0"):
        assert token in text
