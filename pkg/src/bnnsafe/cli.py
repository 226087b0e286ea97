"""Batch command-line front end.

Every command reads an optional JSON config (``--config``), applies flag
overrides, runs, and writes a JSON report embedding the effective config, its
hash, the seed and the package version. Exit codes: 0 safe or success,
1 unsafe, 2 inconclusive, 3 malformed input.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from pathlib import Path

import numpy as np

from .bnn import BnnPolicy, weight_box
from .cegis import DEFAULT_SCHEDULE, CegisConfig, eps_search, run_cegis
from .encoding import verify_feedforward
from .environments import ENVIRONMENTS, make_env, monte_carlo_unsafe, simulate
from .nn import forward
from .reporting import atomic_write, config_hash, to_jsonable, version_string, write_json
from .serl import SerlConfig, run_serl
from .sets import set_from_json
from .zoo import available_policies, load_policy

__all__ = ["main", "EXIT_SAFE", "EXIT_UNSAFE", "EXIT_INCONCLUSIVE", "EXIT_MALFORMED"]

EXIT_SAFE = 0
EXIT_UNSAFE = 1
EXIT_INCONCLUSIVE = 2
EXIT_MALFORMED = 3

DEFAULTS = {
    "seed": 0,
    "timeout": 600.0,
    "out": "out",
    "env": "lds",
    "mode": "bootstrap",
    "eps": 0.5,
    "relative_eps": True,
    "backend": "highs",
    "schedule": list(DEFAULT_SCHEDULE),
    "mc_rollouts": 100000,
    "mc_horizon": 100,
    "grid_points": 41,
    "trajectories": 10,
    "horizon": 100,
    "env_options": {},
    "cegis": {},
    "serl": {},
}


class MalformedInput(Exception):
    """Raised for unreadable or inconsistent input files and options."""


def _load_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise MalformedInput(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise MalformedInput("config file must hold a JSON object")
        cfg.update(loaded)
    for key in ("seed", "timeout", "out", "env", "mode", "policy", "eps"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if cfg["env"] not in ENVIRONMENTS:
        raise MalformedInput(f"unknown environment {cfg['env']!r}")
    return cfg


def _policy(cfg: dict) -> BnnPolicy:
    ref = cfg.get("policy")
    if ref is None:
        ref = cfg.get("env")
    path = Path(str(ref))
    try:
        if path.suffix == ".json" or path.exists():
            return BnnPolicy.load(path)
        return load_policy(str(ref))
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MalformedInput(f"cannot load policy {ref!r}: {exc}") from exc


def _env(cfg: dict):
    try:
        return make_env(cfg["env"], **cfg.get("env_options", {}))
    except TypeError as exc:
        raise MalformedInput(f"bad env_options: {exc}") from exc


def _cegis_config(cfg: dict) -> CegisConfig:
    opts = {"mode": cfg["mode"], "timeout": float(cfg["timeout"]), "backend": cfg["backend"],
            "relative_eps": bool(cfg["relative_eps"])}
    opts.update(cfg.get("cegis", {}))
    try:
        return CegisConfig.from_dict(opts)
    except (TypeError, ValueError) as exc:
        raise MalformedInput(f"bad cegis options: {exc}") from exc


def _report(command: str, cfg: dict, result: dict) -> dict:
    return {
        "command": command,
        "version": version_string(),
        "seed": cfg["seed"],
        "config_hash": config_hash(cfg),
        "config": to_jsonable(cfg),
        "result": result,
    }


def _out(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _invariant_grid_csv(g, env, points: int) -> str:
    grid = env.state_box.grid(points)
    vals = forward(g, grid)[:, 0]
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow([f"x{k}" for k in range(env.state_dim)] + ["g", "inside"])
    for row, v in zip(grid, vals):
        writer.writerow([repr(float(c)) for c in row] + [repr(float(v)), int(v >= 0)])
    return buf.getvalue()


# -------------------------------------------------------------------------------------
# Commands
# -------------------------------------------------------------------------------------


def cmd_verify_ff(cfg: dict) -> int:
    policy = _policy(cfg)
    try:
        x0_set = set_from_json(cfg["x0"])
        unsafe = set_from_json(cfg["unsafe"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedInput(f"verify-ff needs 'x0' and 'unsafe' set descriptions: {exc}") from exc
    if x0_set.dim != policy.input_dim or unsafe.dim != policy.output_dim:
        raise MalformedInput("set dimensions do not match the policy")
    box = weight_box(policy, float(cfg["eps"]), bool(cfg["relative_eps"]))
    verdict = verify_feedforward(policy, x0_set, unsafe, box, float(cfg["timeout"]), cfg["backend"])
    result = {"status": verdict.status.upper(), "disjuncts_solved": len(verdict.results)}
    if verdict.status == "unsafe":
        result["witness"] = {
            "disjunct": verdict.disjunct,
            "x0": verdict.x0,
            "output": verdict.output,
            "weights": verdict.weights,
            "replay_output": verdict.replay_output,
            "residual": verdict.residual,
            "replay_in_unsafe": bool(unsafe.contains(verdict.replay_output, tol=1e-5)),
        }
    write_json(_out(cfg) / "verify_ff.json", _report("verify-ff", cfg, result))
    print(result["status"] if verdict.status != "unsafe" else f"UNSAFE witness x0={verdict.x0.tolist()}")
    return {"safe": EXIT_SAFE, "unsafe": EXIT_UNSAFE}.get(verdict.status, EXIT_INCONCLUSIVE)


def cmd_certify(cfg: dict) -> int:
    env, policy = _env(cfg), _policy(cfg)
    ccfg = _cegis_config(cfg)
    rng = np.random.default_rng(int(cfg["seed"]))
    eps = float(cfg["eps"])
    outcome = run_cegis(env, policy, eps, ccfg, rng)
    out = _out(cfg)
    result = outcome.report()
    code = EXIT_INCONCLUSIVE
    if outcome.safe:
        box = weight_box(policy, eps, ccfg.relative_eps)
        bad = monte_carlo_unsafe(env, policy, box, rng, int(cfg["mc_rollouts"]), int(cfg["mc_horizon"]))
        result["monte_carlo"] = {"rollouts": int(cfg["mc_rollouts"]), "horizon": int(cfg["mc_horizon"]),
                                 "violations": bad}
        if bad:
            # a certified system that fails simulation signals a bug; never report it as safe
            result["status"] = "inconsistent"
            code = EXIT_UNSAFE
        else:
            code = EXIT_SAFE
        atomic_write(out / "invariant_grid.csv", _invariant_grid_csv(outcome.invariant, env, int(cfg["grid_points"])))
        write_json(out / "certificate.json", outcome.certificate())
    write_json(out / "certify.json", _report("certify", cfg, result))
    print(f"{result['status'].upper()} eps={eps} iterations={outcome.iterations} reason={outcome.reason}")
    return code


def cmd_eps_search(cfg: dict) -> int:
    env, policy = _env(cfg), _policy(cfg)
    ccfg = _cegis_config(cfg)
    rng = np.random.default_rng(int(cfg["seed"]))
    start = time.monotonic()
    result = eps_search(env, policy, cfg["schedule"], ccfg, rng)
    runtime = time.monotonic() - start
    out = _out(cfg)
    largest = result.largest_safe
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["env", "mode", "verified_eps", "runtime_s"])
    writer.writerow([env.name, ccfg.mode, "-" if largest is None else largest, f"{runtime:.1f}"])
    atomic_write(out / "eps_search.csv", buf.getvalue())
    report = {
        "largest_safe": largest,
        "runtime_s": runtime,
        "levels": [{"eps": eps, **o.report()} for eps, o in result.entries],
    }
    if result.certificate is not None:
        write_json(out / "certificate.json", result.certificate.certificate())
    write_json(out / "eps_search.json", _report("eps-search", cfg, report))
    print(f"largest certified eps: {'-' if largest is None else largest}")
    return EXIT_SAFE if largest is not None else EXIT_INCONCLUSIVE


def cmd_simulate(cfg: dict) -> int:
    env, policy = _env(cfg), _policy(cfg)
    rng = np.random.default_rng(int(cfg["seed"]))
    box = weight_box(policy, float(cfg["eps"]), bool(cfg["relative_eps"]))
    n = int(cfg["trajectories"])
    x0 = env.sample_states(env.initial_set, rng, n)
    batch = simulate(env, policy, box, rng, x0, int(cfg["horizon"]))
    out = _out(cfg)
    for k in range(n):
        length = int(batch.lengths[k])
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["t"] + [f"x{j}" for j in range(env.state_dim)] + ["u0", "safe"])
        safe = int(not batch.unsafe[k])
        for t in range(length + 1):
            act = repr(float(batch.actions[k, t, 0])) if t < length else ""
            writer.writerow([t] + [repr(float(v)) for v in batch.states[k, t]] + [act, safe])
        atomic_write(out / f"trajectory_{k:04d}.csv", buf.getvalue())
    unsafe = int(batch.unsafe.sum())
    write_json(out / "simulate.json", _report("simulate", cfg, {"trajectories": n, "unsafe": unsafe}))
    print(f"{n} trajectories, {unsafe} unsafe")
    return EXIT_SAFE if unsafe == 0 else EXIT_UNSAFE


def cmd_serl(cfg: dict) -> int:
    env, policy = _env(cfg), _policy(cfg)
    try:
        scfg = SerlConfig(**cfg.get("serl", {}))
    except (TypeError, ValueError) as exc:
        raise MalformedInput(f"bad serl options: {exc}") from exc
    rng = np.random.default_rng(int(cfg["seed"]))
    recertify = None
    if scfg.recertify:
        ccfg = _cegis_config(cfg)

        def recertify(p):
            return eps_search(env, p, cfg["schedule"], ccfg, rng).largest_safe

    result = run_serl(env, policy, float(cfg["eps"]), scfg, rng, bool(cfg["relative_eps"]), recertify)
    out = _out(cfg)
    atomic_write(out / "serl_curve.csv", result.curve_csv())
    atomic_write(out / "serl_policy.json", json.dumps(result.policy.to_json(), indent=1))
    write_json(out / "serl.json", _report("serl", cfg, result.report()))
    unsafe = sum(r.unsafe_count for r in result.records)
    print(f"{len(result.records)} iterations, final mean return {result.records[-1].mean_return:.4f}, "
          f"{unsafe} unsafe trajectories")
    return EXIT_SAFE if unsafe == 0 else EXIT_UNSAFE


COMMANDS = {
    "verify-ff": cmd_verify_ff,
    "certify": cmd_certify,
    "eps-search": cmd_eps_search,
    "simulate": cmd_simulate,
    "serl": cmd_serl,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bnnsafe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--timeout", type=float, help="seconds")
        p.add_argument("--out", help="output directory")
        p.add_argument("--env", choices=sorted(ENVIRONMENTS))
        p.add_argument("--mode", choices=["no_retrain", "spec_init", "bootstrap"])
        p.add_argument("--policy", help=f"policy JSON path or shipped name ({', '.join(available_policies())})")
        p.add_argument("--eps", type=float, help="weight-box scale")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args)
        return COMMANDS[args.command](cfg)
    except MalformedInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MALFORMED


if __name__ == "__main__":
    sys.exit(main())
