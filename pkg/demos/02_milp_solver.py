"""The built-in branch-and-bound MILP solver next to the HiGHS backend.

A small facility-style problem with binary open/close decisions is solved by
both backends and exported in LP format.
"""

from bnnsafe.milp import MilpProblem, solve

p = MilpProblem("facilities")
opened = [p.add_binary(f"open{k}") for k in range(3)]
ship = [p.add_var(f"ship{k}", 0.0, 10.0) for k in range(3)]
fixed_cost = [4.0, 3.0, 5.0]
unit_cost = [1.0, 1.5, 0.8]
p.add_constraint({s: 1.0 for s in ship}, ">=", 12.0, name="demand")
for o, s in zip(opened, ship):
    p.add_constraint({s: 1.0, o: -10.0}, "<=", 0.0)
objective = {o: c for o, c in zip(opened, fixed_cost)}
objective.update({s: c for s, c in zip(ship, unit_cost)})
p.set_objective(objective, "min")

for backend in ("native", "highs"):
    res = solve(p, backend=backend)
    plan = {p.names()[i]: float(round(res.x[i], 3)) for i in opened + ship}
    print(f"{backend:6s}: {res.status.value}, cost {res.objective:.3f}, nodes {res.nodes}, plan {plan}")

print()
print(p.to_lp())
