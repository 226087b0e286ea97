"""Small mixed-integer linear programming toolkit.

A :class:`MilpProblem` holds bounded continuous and binary variables, linear
constraints and a linear objective. :func:`solve` runs a dense bounded-variable
simplex inside best-bound branch and bound (``backend="native"``) or hands the
problem to HiGHS through :func:`scipy.optimize.milp` (``backend="highs"``).
Both backends return a :class:`MilpResult` whose assignments are polished so
that binaries are exactly 0/1 and every constraint holds within ``TOL_FEAS``.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

__all__ = [
    "TOL_FEAS",
    "TOL_INT",
    "Status",
    "Variable",
    "Constraint",
    "MilpProblem",
    "MilpResult",
    "LpResult",
    "solve",
    "solve_lp",
    "check_feasible",
]

TOL_FEAS = 1e-6
TOL_INT = 1e-6
_PIV = 1e-9
_OPT = 1e-9

SENSES = ("<=", ">=", "==")


class Status(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class Variable:
    name: str
    lower: float
    upper: float
    binary: bool = False


@dataclass(frozen=True)
class Constraint:
    coeffs: tuple[tuple[int, float], ...]
    sense: str
    rhs: float
    name: str = ""


def _as_terms(expr) -> dict[int, float]:
    if isinstance(expr, Mapping):
        items = expr.items()
    else:
        items = expr
    terms: dict[int, float] = {}
    for idx, coef in items:
        coef = float(coef)
        if coef != 0.0:
            terms[int(idx)] = terms.get(int(idx), 0.0) + coef
    return terms


class MilpProblem:
    """Linear constraints over explicitly bounded continuous and binary variables.

    Linear expressions are mappings (or pair iterables) from variable index to
    coefficient. Strict inequalities are not representable; encode ``a.x < b``
    as ``a.x <= b - delta`` at the call site.
    """

    def __init__(self, name: str = "milp"):
        self.name = name
        self.variables: list[Variable] = []
        self.constraints: list[Constraint] = []
        self.objective: dict[int, float] = {}
        self.objective_constant = 0.0
        self.sense = "max"
        self._names: dict[str, int] = {}

    # -- construction -------------------------------------------------------------
    def add_var(self, name: str | None = None, lower: float = 0.0, upper: float = 0.0, binary: bool = False) -> int:
        if name is None:
            name = f"v{len(self.variables)}"
        if name in self._names:
            raise ValueError(f"duplicate variable name {name!r}")
        if binary:
            lower, upper = 0.0, 1.0
        lower, upper = float(lower), float(upper)
        if not (math.isfinite(lower) and math.isfinite(upper)):
            raise ValueError(f"variable {name!r} must have finite bounds, got [{lower}, {upper}]")
        if lower > upper:
            raise ValueError(f"variable {name!r} has lower bound {lower} > upper bound {upper}")
        self._names[name] = len(self.variables)
        self.variables.append(Variable(name, lower, upper, binary))
        return len(self.variables) - 1

    def add_vars(self, prefix: str, lower, upper, binary: bool = False) -> list[int]:
        lower = np.atleast_1d(np.asarray(lower, dtype=np.float64))
        upper = np.atleast_1d(np.asarray(upper, dtype=np.float64))
        lower, upper = np.broadcast_arrays(lower, upper)
        return [self.add_var(f"{prefix}[{k}]", lo, hi, binary) for k, (lo, hi) in enumerate(zip(lower, upper))]

    def add_binary(self, name: str | None = None) -> int:
        return self.add_var(name, 0.0, 1.0, binary=True)

    def add_constraint(self, expr, sense: str, rhs: float, name: str = "") -> None:
        if sense == "=":
            sense = "=="
        if sense not in SENSES:
            raise ValueError(f"unsupported relation {sense!r}; strict inequalities must be relaxed by the caller")
        terms = _as_terms(expr)
        for idx, coef in terms.items():
            if not 0 <= idx < len(self.variables):
                raise IndexError(f"unknown variable index {idx}")
            if not math.isfinite(coef):
                raise ValueError("constraint coefficients must be finite")
        rhs = float(rhs)
        if not math.isfinite(rhs):
            raise ValueError("constraint right-hand side must be finite")
        self.constraints.append(Constraint(tuple(sorted(terms.items())), sense, rhs, name))

    def fix(self, idx: int, value: float) -> None:
        self.add_constraint({idx: 1.0}, "==", value)

    def set_objective(self, expr, sense: str = "max", constant: float = 0.0) -> None:
        if sense not in ("max", "min"):
            raise ValueError("objective sense must be 'max' or 'min'")
        self.objective = _as_terms(expr)
        self.sense = sense
        self.objective_constant = float(constant)

    # -- introspection ------------------------------------------------------------
    @property
    def num_vars(self) -> int:
        return len(self.variables)

    @property
    def binaries(self) -> list[int]:
        return [i for i, v in enumerate(self.variables) if v.binary]

    def index(self, name: str) -> int:
        return self._names[name]

    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([v.lower for v in self.variables], dtype=np.float64)
        hi = np.array([v.upper for v in self.variables], dtype=np.float64)
        return lo, hi

    def matrix(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Dense ``(A, senses, rhs)`` with senses encoded -1 (<=), +1 (>=), 0 (==)."""
        a = np.zeros((len(self.constraints), self.num_vars))
        sense = np.zeros(len(self.constraints), dtype=np.int8)
        rhs = np.zeros(len(self.constraints))
        code = {"<=": -1, ">=": 1, "==": 0}
        for r, con in enumerate(self.constraints):
            for idx, coef in con.coeffs:
                a[r, idx] += coef
            sense[r] = code[con.sense]
            rhs[r] = con.rhs
        return a, sense, rhs

    def objective_vector(self) -> np.ndarray:
        c = np.zeros(self.num_vars)
        for idx, coef in self.objective.items():
            c[idx] = coef
        return c

    def evaluate(self, expr, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        return float(sum(coef * x[idx] for idx, coef in _as_terms(expr).items()))

    def to_lp(self) -> str:
        """Render in CPLEX LP text format for cross-checking with external solvers."""

        def fmt(terms):
            if not terms:
                return "0 " + self.variables[0].name if self.variables else "0"
            out = []
            for k, (idx, coef) in enumerate(terms):
                sign = "-" if coef < 0 else "+"
                mag = repr(abs(coef))
                name = self.variables[idx].name
                out.append(f"{sign} {mag} {name}" if k or sign == "-" else f"{mag} {name}")
            return " ".join(out)

        lines = ["\\ " + self.name, "Maximize" if self.sense == "max" else "Minimize"]
        lines.append(" obj: " + fmt(sorted(self.objective.items())))
        lines.append("Subject To")
        op = {"<=": "<=", ">=": ">=", "==": "="}
        for r, con in enumerate(self.constraints):
            label = con.name or f"c{r}"
            lines.append(f" {label}: {fmt(con.coeffs)} {op[con.sense]} {con.rhs!r}")
        lines.append("Bounds")
        for v in self.variables:
            if not v.binary:
                lines.append(f" {v.lower!r} <= {v.name} <= {v.upper!r}")
        bins = [v.name for v in self.variables if v.binary]
        if bins:
            lines.append("Binaries")
            lines.append(" " + " ".join(bins))
        lines.append("End")
        return "\n".join(lines) + "\n"


@dataclass
class MilpResult:
    status: Status
    x: np.ndarray | None = None
    objective: float | None = None
    names: list[str] = field(default_factory=list, repr=False)
    nodes: int = 0
    runtime: float = 0.0

    @property
    def feasible(self) -> bool:
        return self.x is not None and self.status in (Status.OPTIMAL, Status.TIMEOUT)

    @property
    def assignment(self) -> dict[str, float] | None:
        if self.x is None:
            return None
        return dict(zip(self.names, self.x.tolist()))

    def value(self, var):
        if self.x is None:
            raise ValueError(f"no assignment available (status {self.status.value})")
        if isinstance(var, (list, tuple, np.ndarray)):
            return self.x[np.asarray(var, dtype=int)]
        return float(self.x[var])


def check_feasible(problem: MilpProblem, assignment, tol: float = TOL_FEAS) -> tuple[bool, float]:
    """Replay an assignment against every bound, integrality and constraint.

    ``assignment`` is an array indexed like ``problem.variables`` or a mapping
    from variable name to value. Returns ``(ok, max_violation)``.
    """
    if isinstance(assignment, Mapping):
        missing = [v.name for v in problem.variables if v.name not in assignment]
        if missing:
            raise KeyError(f"assignment is missing variables: {missing[:5]}")
        x = np.array([assignment[v.name] for v in problem.variables], dtype=np.float64)
    else:
        x = np.asarray(assignment, dtype=np.float64)
        if x.shape != (problem.num_vars,):
            raise ValueError(f"assignment has shape {x.shape}, expected ({problem.num_vars},)")
    lo, hi = problem.bounds()
    worst = float(np.max(np.concatenate([[0.0], lo - x, x - hi])))
    for i in problem.binaries:
        worst = max(worst, abs(x[i] - round(x[i])))
    for con in problem.constraints:
        lhs = sum(coef * x[idx] for idx, coef in con.coeffs)
        if con.sense == "<=":
            v = lhs - con.rhs
        elif con.sense == ">=":
            v = con.rhs - lhs
        else:
            v = abs(lhs - con.rhs)
        worst = max(worst, v)
    return worst <= tol, worst


# ---------------------------------------------------------------------------------
# Linear programming: dense bounded-variable primal simplex.
# ---------------------------------------------------------------------------------


@dataclass
class LpResult:
    status: Status
    x: np.ndarray | None = None
    objective: float | None = None
    iterations: int = 0


class _Tableau:
    """Dense tableau for ``min cost.t  s.t.  T t = beta`` with ``0 <= t <= ub``."""

    def __init__(self, a: np.ndarray, b: np.ndarray, ub: np.ndarray, basis: np.ndarray):
        self.T = a
        self.beta = b
        self.ub = ub
        self.basis = basis
        self.at_upper = np.zeros(a.shape[1], dtype=bool)
        self.is_basic = np.zeros(a.shape[1], dtype=bool)
        self.is_basic[basis] = True
        self.iterations = 0

    def reduced_costs(self, cost):
        return cost - cost[self.basis] @ self.T

    def run(self, cost: np.ndarray, deadline: float | None) -> Status | None:
        m, n = self.T.shape
        d = self.reduced_costs(cost)
        degenerate = 0
        bland = False
        bland_after = 2 * (m + n)
        movable = self.ub > 0
        while True:
            self.iterations += 1
            if deadline is not None and self.iterations % 64 == 0 and time.monotonic() > deadline:
                return Status.TIMEOUT
            elig = ~self.is_basic & movable & (
                ((~self.at_upper) & (d < -_OPT)) | (self.at_upper & (d > _OPT))
            )
            cand = np.flatnonzero(elig)
            if cand.size == 0:
                return None
            q = int(cand[0]) if bland else int(cand[np.argmax(np.abs(d[cand]))])
            direction = -1.0 if self.at_upper[q] else 1.0
            alpha = self.T[:, q] * direction
            theta = self.ub[q]
            leave = -1
            with np.errstate(divide="ignore", invalid="ignore"):
                pos = alpha > _PIV
                neg = alpha < -_PIV
                ratios = np.full(m, np.inf)
                ratios[pos] = self.beta[pos] / alpha[pos]
                ub_b = self.ub[self.basis]
                ratios[neg] = (ub_b[neg] - self.beta[neg]) / (-alpha[neg])
            ratios = np.maximum(ratios, 0.0)
            rmin = ratios.min() if m else np.inf
            if rmin < theta:
                ties = np.flatnonzero(ratios <= rmin + 1e-12)
                if bland:
                    leave = int(ties[np.argmin(self.basis[ties])])
                else:
                    leave = int(ties[np.argmax(np.abs(alpha[ties]))])
                theta = ratios[leave]
            if not math.isfinite(theta):
                return Status.UNBOUNDED
            if theta <= 1e-12:
                degenerate += 1
                if degenerate > bland_after:
                    bland = True
            self.beta -= theta * alpha
            if leave < 0:
                self.at_upper[q] = not self.at_upper[q]
                continue
            entering_value = (self.ub[q] if self.at_upper[q] else 0.0) + direction * theta
            out = self.basis[leave]
            self.at_upper[out] = alpha[leave] < 0
            self.is_basic[out] = False
            self.is_basic[q] = True
            self.at_upper[q] = False
            self.basis[leave] = q
            self.beta[leave] = entering_value
            piv_row = self.T[leave] / self.T[leave, q]
            col = self.T[:, q].copy()
            col[leave] = 0.0
            self.T -= np.outer(col, piv_row)
            self.T[leave] = piv_row
            d = d - d[q] * piv_row

    def values(self) -> np.ndarray:
        t = np.where(self.at_upper, self.ub, 0.0)
        t[self.basis] = self.beta
        return t


def solve_lp(c, a, senses, b, lower, upper, deadline: float | None = None) -> LpResult:
    """Minimise ``c.x`` subject to ``a x (senses) b`` and ``lower <= x <= upper``.

    ``senses`` uses -1 for ``<=``, +1 for ``>=`` and 0 for ``==``; all bounds
    must be finite.
    """
    c = np.asarray(c, dtype=np.float64)
    a = np.atleast_2d(np.asarray(a, dtype=np.float64)).reshape(-1, c.size)
    senses = np.asarray(senses).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    n = c.size
    if np.any(lower > upper + 1e-12):
        return LpResult(Status.INFEASIBLE)

    free = upper - lower > 0
    fixed_val = lower.copy()
    rhs = b - a @ fixed_val
    cols = np.flatnonzero(free)
    a_f = a[:, cols]
    ub_f = (upper - lower)[cols]
    m = a.shape[0]

    if m == 0:
        t = np.where(c[cols] < 0, ub_f, 0.0)
        x = fixed_val.copy()
        x[cols] += t
        return LpResult(Status.OPTIMAL, x, float(c @ x), 0)

    # row r: a_f t + slack_sign * s = rhs, s >= 0
    slack_sign = np.where(senses < 0, 1.0, np.where(senses > 0, -1.0, 0.0))
    flip = rhs < 0
    row_sign = np.where(flip, -1.0, 1.0)
    a_f = a_f * row_sign[:, None]
    rhs = rhs * row_sign
    slack_coef = slack_sign * row_sign
    slack_rows = np.flatnonzero(slack_sign != 0)
    needs_art = ~(slack_coef > 0)
    art_rows = np.flatnonzero(needs_art)

    nf, ns, na = cols.size, slack_rows.size, art_rows.size
    width = nf + ns + na
    T = np.zeros((m, width))
    T[:, :nf] = a_f
    T[slack_rows, nf + np.arange(ns)] = slack_coef[slack_rows]
    T[art_rows, nf + ns + np.arange(na)] = 1.0
    ub = np.concatenate([ub_f, np.full(ns, np.inf), np.full(na, np.inf)])

    slack_col = np.full(m, -1)
    slack_col[slack_rows] = nf + np.arange(ns)
    basis = np.empty(m, dtype=int)
    basis[~needs_art] = slack_col[~needs_art]
    basis[art_rows] = nf + ns + np.arange(na)

    tab = _Tableau(T, rhs.copy(), ub, basis)
    if na:
        cost1 = np.zeros(width)
        cost1[nf + ns:] = 1.0
        st = tab.run(cost1, deadline)
        if st is Status.TIMEOUT:
            return LpResult(Status.TIMEOUT, iterations=tab.iterations)
        infeas = float(np.sum(tab.values()[nf + ns:]))
        scale = 1.0 + float(np.max(np.abs(rhs)))
        if infeas > min(1e-9 * scale, 1e-6):
            return LpResult(Status.INFEASIBLE, iterations=tab.iterations)
        tab.ub[nf + ns:] = 0.0
        tab.at_upper[nf + ns:] = False
        art_basic = tab.basis >= nf + ns
        tab.beta[art_basic] = 0.0
    cost2 = np.zeros(width)
    cost2[:nf] = c[cols]
    st = tab.run(cost2, deadline)
    if st is Status.TIMEOUT:
        return LpResult(Status.TIMEOUT, iterations=tab.iterations)
    if st is Status.UNBOUNDED:
        return LpResult(Status.UNBOUNDED, iterations=tab.iterations)
    t = tab.values()[:nf]
    t = np.clip(t, 0.0, ub_f)
    x = fixed_val.copy()
    x[cols] += t
    return LpResult(Status.OPTIMAL, x, float(c @ x), tab.iterations)


# ---------------------------------------------------------------------------------
# Branch and bound
# ---------------------------------------------------------------------------------


def _polish(problem: MilpProblem, x: np.ndarray, a, senses, b, lo, hi, c) -> np.ndarray | None:
    """Round binaries, re-solve the continuous part, and confirm feasibility."""
    lo2, hi2 = lo.copy(), hi.copy()
    for i in problem.binaries:
        lo2[i] = hi2[i] = float(round(x[i]))
    res = solve_lp(c, a, senses, b, lo2, hi2)
    if res.status is not Status.OPTIMAL:
        return None
    y = res.x
    for i in problem.binaries:
        y[i] = lo2[i]
    ok, _ = check_feasible(problem, y)
    return y if ok else None


def _solve_native(problem: MilpProblem, time_limit: float | None) -> MilpResult:
    start = time.monotonic()
    deadline = None if time_limit is None else start + time_limit
    a, senses, b = problem.matrix()
    lo, hi = problem.bounds()
    sign = -1.0 if problem.sense == "max" else 1.0
    c = sign * problem.objective_vector()
    bins = np.array(problem.binaries, dtype=int)

    incumbent = None
    best = np.inf
    counter = itertools.count()
    nodes = 0

    root = solve_lp(c, a, senses, b, lo, hi, deadline)
    if root.status is Status.INFEASIBLE:
        return MilpResult(Status.INFEASIBLE, names=problem.names(), nodes=1, runtime=time.monotonic() - start)
    if root.status is Status.UNBOUNDED:
        return MilpResult(Status.UNBOUNDED, names=problem.names(), nodes=1, runtime=time.monotonic() - start)
    heap = []
    if root.status is Status.OPTIMAL:
        heapq.heappush(heap, (root.objective, 0, next(counter), lo, hi, root))
    timed_out = root.status is Status.TIMEOUT

    while heap and not timed_out:
        bound, neg_depth, _, nlo, nhi, lp = heapq.heappop(heap)
        if bound >= best - TOL_FEAS:
            continue
        nodes += 1
        if deadline is not None and time.monotonic() > deadline:
            timed_out = True
            break
        xb = lp.x[bins] if bins.size else np.zeros(0)
        frac = np.abs(xb - np.round(xb))
        if bins.size == 0 or frac.max() <= TOL_INT:
            y = _polish(problem, lp.x, a, senses, b, nlo, nhi, c)
            if y is not None:
                val = float(c @ y)
                if val < best:
                    best, incumbent = val, y
                continue
            # rounding broke feasibility: keep branching on the unfixed binaries
        frac = np.where(nlo[bins] < nhi[bins], frac, -1.0)
        if frac.max() < 0:
            continue
        k = int(np.argmax(frac))  # argmax returns the lowest index on ties
        j = int(bins[k])
        for branch in (0.0, 1.0) if lp.x[j] < 0.5 else (1.0, 0.0):
            clo, chi = nlo.copy(), nhi.copy()
            clo[j] = chi[j] = branch
            child = solve_lp(c, a, senses, b, clo, chi, deadline)
            if child.status is Status.TIMEOUT:
                timed_out = True
                break
            if child.status is Status.OPTIMAL and child.objective < best - TOL_FEAS:
                heapq.heappush(heap, (child.objective, neg_depth - 1, next(counter), clo, chi, child))

    runtime = time.monotonic() - start
    names = problem.names()
    if timed_out:
        obj = None if incumbent is None else sign * best + problem.objective_constant
        return MilpResult(Status.TIMEOUT, incumbent, obj, names, nodes, runtime)
    if incumbent is None:
        return MilpResult(Status.INFEASIBLE, None, None, names, nodes, runtime)
    return MilpResult(Status.OPTIMAL, incumbent, sign * best + problem.objective_constant, names, nodes, runtime)


def _solve_highs(problem: MilpProblem, time_limit: float | None) -> MilpResult:
    from scipy.optimize import Bounds, LinearConstraint, milp
    from scipy.sparse import csr_array

    start = time.monotonic()
    names = problem.names()
    lo, hi = problem.bounds()
    sign = -1.0 if problem.sense == "max" else 1.0
    c = sign * problem.objective_vector()
    rows, cols, vals = [], [], []
    clo, chi = [], []
    for r, con in enumerate(problem.constraints):
        for idx, coef in con.coeffs:
            rows.append(r)
            cols.append(idx)
            vals.append(coef)
        clo.append(con.rhs if con.sense in (">=", "==") else -np.inf)
        chi.append(con.rhs if con.sense in ("<=", "==") else np.inf)
    integrality = np.array([1 if v.binary else 0 for v in problem.variables])
    constraints = []
    if problem.constraints:
        mat = csr_array((vals, (rows, cols)), shape=(len(problem.constraints), problem.num_vars))
        constraints = [LinearConstraint(mat, np.array(clo), np.array(chi))]
    options = {"mip_rel_gap": 1e-9, "presolve": True}
    if time_limit is not None:
        options["time_limit"] = float(time_limit)
    res = milp(c, integrality=integrality, bounds=Bounds(lo, hi), constraints=constraints, options=options)
    runtime = time.monotonic() - start
    if res.status == 2:
        return MilpResult(Status.INFEASIBLE, names=names, runtime=runtime)
    if res.status == 3:
        return MilpResult(Status.UNBOUNDED, names=names, runtime=runtime)
    x = None
    if res.x is not None:
        a, senses, b = problem.matrix()
        x = _polish(problem, np.asarray(res.x), a, senses, b, lo, hi, c)
        if x is None:
            ok, _ = check_feasible(problem, np.where(integrality > 0, np.round(res.x), res.x))
            x = np.where(integrality > 0, np.round(res.x), res.x) if ok else None
    if res.status == 0 and x is not None:
        return MilpResult(Status.OPTIMAL, x, sign * float(c @ x) + problem.objective_constant, names, 0, runtime)
    if res.status == 0:
        # HiGHS claims optimality but the polished point fails replay; report it honestly.
        raise RuntimeError("HiGHS returned a solution that fails feasibility replay")
    obj = None if x is None else sign * float(c @ x) + problem.objective_constant
    return MilpResult(Status.TIMEOUT, x, obj, names, 0, runtime)


def solve(problem: MilpProblem, time_limit: float | None = None, backend: str = "native") -> MilpResult:
    """Solve to global optimality (absolute gap ``TOL_FEAS``) or until ``time_limit`` seconds."""
    if backend == "native":
        return _solve_native(problem, time_limit)
    if backend == "highs":
        return _solve_highs(problem, time_limit)
    raise ValueError(f"unknown backend {backend!r}")
