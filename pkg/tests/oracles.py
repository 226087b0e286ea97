"""Independent reference computations shared by unit and acceptance tests."""

import itertools

import numpy as np
from scipy.optimize import linprog

from bnnsafe.milp import MilpProblem


def random_milp(rng, n_bin=None, n_cont=None, n_cons=None):
    """A random bounded MILP together with its raw arrays.

    Returns ``(problem, data)`` where ``data`` holds ``c, A, senses, b, lo, hi,
    is_bin`` in the variable order of ``problem`` and maximisation sense.
    """
    n_bin = int(rng.integers(0, 11)) if n_bin is None else n_bin
    n_cont = int(rng.integers(1, 9)) if n_cont is None else n_cont
    n = n_bin + n_cont
    m = int(rng.integers(1, 9)) if n_cons is None else n_cons
    is_bin = np.array([True] * n_bin + [False] * n_cont)
    rng.shuffle(is_bin)
    lo = np.where(is_bin, 0.0, rng.integers(-5, 1, size=n).astype(float))
    hi = np.where(is_bin, 1.0, rng.integers(1, 6, size=n).astype(float))
    a = np.round(rng.normal(size=(m, n)) * 2, 2)
    a[rng.random((m, n)) < 0.3] = 0.0
    senses = rng.choice(["<=", ">=", "=="], size=m, p=[0.6, 0.3, 0.1])
    # anchor the right-hand sides at a random point so many instances are feasible
    anchor = np.where(is_bin, rng.integers(0, 2, size=n), rng.uniform(lo, hi))
    slack = rng.uniform(-1.0, 3.0, size=m)
    b = a @ anchor + np.where(senses == "<=", slack, np.where(senses == ">=", -slack, 0.0))
    b = np.round(b, 3)
    c = np.round(rng.normal(size=n), 2)
    prob = MilpProblem("random")
    for j in range(n):
        if is_bin[j]:
            prob.add_binary(f"z{j}")
        else:
            prob.add_var(f"x{j}", lo[j], hi[j])
    for r in range(m):
        prob.add_constraint({j: a[r, j] for j in range(n) if a[r, j] != 0.0}, senses[r], b[r])
    prob.set_objective({j: c[j] for j in range(n)}, "max")
    return prob, dict(c=c, A=a, senses=senses, b=b, lo=lo, hi=hi, is_bin=is_bin)


def enumerate_milp(data):
    """Best objective over all binary assignments, each completed by an LP. ``None`` if infeasible."""
    c, a, senses, b = data["c"], data["A"], data["senses"], data["b"]
    lo, hi, is_bin = data["lo"], data["hi"], data["is_bin"]
    bins = np.flatnonzero(is_bin)
    ub_rows = senses == "<="
    lb_rows = senses == ">="
    eq_rows = senses == "=="
    a_ub = np.vstack([a[ub_rows], -a[lb_rows]])
    b_ub = np.concatenate([b[ub_rows], -b[lb_rows]])
    best = None
    for assign in itertools.product([0.0, 1.0], repeat=bins.size):
        l2, h2 = lo.copy(), hi.copy()
        l2[bins] = h2[bins] = assign
        res = linprog(-c, A_ub=a_ub if a_ub.size else None, b_ub=b_ub if a_ub.size else None,
                      A_eq=a[eq_rows] if eq_rows.any() else None, b_eq=b[eq_rows] if eq_rows.any() else None,
                      bounds=list(zip(l2, h2)), method="highs")
        if res.status == 0:
            val = -res.fun
            best = val if best is None else max(best, val)
    return best


def lp_vertex_enumeration(c, a_ub, b_ub, lo, hi):
    """Maximum of ``c.x`` over ``a_ub x <= b_ub, lo <= x <= hi`` by visiting every vertex."""
    n = c.size
    rows = np.vstack([a_ub, np.eye(n), -np.eye(n)])
    rhs = np.concatenate([b_ub, hi, -lo])
    best = None
    for idx in itertools.combinations(range(rows.shape[0]), n):
        sub = rows[list(idx)]
        if abs(np.linalg.det(sub)) < 1e-10:
            continue
        x = np.linalg.solve(sub, rhs[list(idx)])
        if np.all(rows @ x <= rhs + 1e-9):
            val = float(c @ x)
            best = val if best is None else max(best, val)
    return best
