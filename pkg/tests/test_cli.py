import csv
import json
import subprocess
import sys

import pytest

from bnnsafe.cli import EXIT_INCONCLUSIVE, EXIT_MALFORMED, EXIT_SAFE, EXIT_UNSAFE, main


def _config(tmp_path, **kw):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(kw))
    return str(path)


def _ff(tmp_path, threshold):
    cfg = _config(tmp_path, x0={"type": "box", "lower": [-0.5, -0.5], "upper": [0.5, 0.5]},
                  unsafe={"type": "polyhedron", "A": [[-1.0]], "b": [-threshold]})
    return main(["verify-ff", "--config", cfg, "--policy", "lds", "--eps", "1.0", "--out", str(tmp_path / "o")])


def test_verify_ff_safe_and_unsafe_exit_codes(tmp_path, capsys):
    assert _ff(tmp_path, 5.0) == EXIT_SAFE
    assert "SAFE" in capsys.readouterr().out
    assert _ff(tmp_path, -5.0) == EXIT_UNSAFE
    report = json.loads((tmp_path / "o" / "verify_ff.json").read_text())
    assert report["result"]["status"] == "UNSAFE"
    assert report["result"]["witness"]["replay_in_unsafe"]
    for key in ("version", "seed", "config_hash", "config", "command"):
        assert key in report


def test_malformed_inputs_exit_3(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["simulate", "--config", str(bad)]) == EXIT_MALFORMED
    assert main(["simulate", "--policy", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == EXIT_MALFORMED
    cfg = _config(tmp_path, x0={"type": "box", "lower": [0], "upper": [1]})
    assert main(["verify-ff", "--config", cfg, "--out", str(tmp_path)]) == EXIT_MALFORMED
    cfg = _config(tmp_path, cegis={"lam": -1})
    assert main(["certify", "--config", cfg, "--out", str(tmp_path)]) == EXIT_MALFORMED


def test_unknown_subcommand_is_rejected():
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_simulate_is_reproducible(tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["simulate", "--env", "lds", "--seed", "4", "--out", str(out)]) == EXIT_SAFE
        outs.append(out)
    files = sorted(p.name for p in outs[0].glob("trajectory_*.csv"))
    assert len(files) == 10
    for f in files:
        assert (outs[0] / f).read_text() == (outs[1] / f).read_text()
    rows = list(csv.reader((outs[0] / files[0]).open()))
    assert rows[0] == ["t", "x0", "x1", "u0", "safe"] and len(rows) == 102


def test_certify_timeout_is_inconclusive(tmp_path):
    cfg = _config(tmp_path, cegis={"init_samples_x0": 16, "init_samples_xu": 16,
                                   "pretrain": {"epochs": 1}, "max_iterations": 1})
    code = main(["certify", "--config", cfg, "--mode", "spec_init", "--timeout", "30", "--out", str(tmp_path)])
    report = json.loads((tmp_path / "certify.json").read_text())
    if code == EXIT_SAFE:
        assert (tmp_path / "certificate.json").exists() and (tmp_path / "invariant_grid.csv").exists()
    else:
        assert code == EXIT_INCONCLUSIVE and report["result"]["status"] == "unsafe"


def test_serl_writes_curve_and_policy(tmp_path):
    cfg = _config(tmp_path, policy="lds_detuned", serl={"iterations": 2, "rollouts_per_iter": 8, "horizon": 10})
    assert main(["serl", "--config", cfg, "--out", str(tmp_path)]) == EXIT_SAFE
    rows = list(csv.reader((tmp_path / "serl_curve.csv").open()))
    assert len(rows) == 3
    assert json.loads((tmp_path / "serl_policy.json").read_text())["layers"]


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "bnnsafe", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "verify-ff" in proc.stdout
