"""Command-line front-end: configs, artifacts and exit codes."""
import json
import subprocess
import sys
from pathlib import Path

import pytest

from dgflow import cli

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def summary(out):
    return json.loads((Path(out) / "summary.json").read_text())


def test_counterexample_flags_non_coercivity(tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["--config", str(CONFIGS / "counterexample.toml"), "--out", str(out)]) == 0
    s = summary(out)
    assert s["x1_final"] >= 0.5 and s["checks"]["x1_at_least_half"]
    assert s["flag"] == "non-coercive: constraint not reached"
    assert "non-coercive: constraint not reached" in capsys.readouterr().out
    head = (out / "trajectory.csv").read_text().splitlines()[0]
    assert head == "t,x_1,x_2,consensus_err,h_restricted,subgrad_residual,dt"


def test_manifold_saddle3d_all_checks_pass(tmp_path):
    out = tmp_path / "out"
    assert cli.main(["--config", str(CONFIGS / "manifold_saddle3d.toml"), "--out", str(out), "--quiet"]) == 0
    s = summary(out)
    assert s["passed"] and all(s["checks"].values())
    assert set(s["checks"]) == {"on_manifold", "off_manifold", "tangency", "residual"}
    assert (out / "chart.csv").exists() and (out / "chart.svg").exists()
    meta = json.loads((out / "chart_meta.json").read_text())
    assert meta["n_s"] == 2 and meta["q"] == 1


def test_tau_order_violation_exits_2(tmp_path, capsys):
    code = cli.main(["--config", str(CONFIGS / "bad_schedule.toml"), "--out", str(tmp_path)])
    assert code == 2
    assert "A.6" in capsys.readouterr().err
    assert not (tmp_path / "summary.json").exists()


@pytest.mark.parametrize("text,needle", [
    ('experiment = "nope"\n', "experiment"),
    ('experiment = "run_dgf"\n[objective]\nname = "no_such"\n[graph]\nkind = "ring"\nagents = 3\n', "no_such"),
    ('experiment = "run_dgf" [broken', "malformed config"),
    ('experiment = "run_dgf"\n[objective]\nname = "quadratic"\n[graph]\nagents = 3\nedges = [[1, 2]]\n'
     '[schedule]\nc_alpha = 1.0\ntau_alpha = 0.6\nc_beta = 1.0\ntau_beta = 0.1\n', "Disconnected"),
])
def test_invalid_configs_exit_2(tmp_path, capsys, text, needle):
    assert cli.main(["--config", write(tmp_path, text), "--out", str(tmp_path / "o")]) == 2
    assert needle in capsys.readouterr().err


def test_missing_file_exits_2(tmp_path, capsys):
    assert cli.main(["--config", str(tmp_path / "absent.toml")]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_montecarlo_needs_seed(tmp_path, capsys):
    text = (CONFIGS / "montecarlo_quartic.toml").read_text().replace("seed = 2024\n", "")
    assert cli.main(["--config", write(tmp_path, text), "--out", str(tmp_path / "o")]) == 2
    assert "seed" in capsys.readouterr().err


def test_numerical_failure_exits_3(tmp_path, capsys):
    text = """experiment = "run_penalized"
[objective]
name = "coercivity_counterexample"
[gamma]
c = 0.0
p = 0.0
offset = 1.0
[init]
x0 = [1.0, 1.0]
[integration]
t_end = 100.0
"""
    assert cli.main(["--config", write(tmp_path, text), "--out", str(tmp_path / "o")]) == 3
    assert "BlowUp" in capsys.readouterr().err


def test_catalog_listing(capsys):
    assert cli.main(["--list-catalog"]) == 0
    text = capsys.readouterr().out
    lines = {ln.split()[0]: ln for ln in text.splitlines() if ln.strip()}
    assert "(0, 0, 0)" in lines["saddle3d"].replace(".0", "") and "q=1" in lines["saddle3d"]
    assert "piecewise_smooth" in lines["abs_median"]
    assert "violates_B8" in lines["eig_discontinuity"]
    # deterministic
    cli.main(["--list-catalog"])
    assert capsys.readouterr().out == text


def test_rerun_is_byte_identical(tmp_path):
    cfg = str(CONFIGS / "dgf_quartic_ring.toml")
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["--config", cfg, "--out", str(a), "--quiet"]) == 0
    assert cli.main(["--config", cfg, "--out", str(b), "--quiet"]) == 0
    assert (a / "trajectory.csv").read_bytes() == (b / "trajectory.csv").read_bytes()
    assert (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()
    assert summary(a)["passed"]


def test_seed_override_changes_initial_state(tmp_path):
    cfg = str(CONFIGS / "dgf_quartic_ring.toml")
    cli.main(["--config", cfg, "--out", str(tmp_path / "a"), "--quiet", "--seed", "1"])
    cli.main(["--config", cfg, "--out", str(tmp_path / "b"), "--quiet", "--seed", "2"])
    row = lambda d: (tmp_path / d / "trajectory.csv").read_text().splitlines()[1]  # noqa: E731
    assert row("a") != row("b")
    assert summary(tmp_path / "a")["seed"] == 1


def test_montecarlo_threads_do_not_change_results(tmp_path):
    cfg = str(CONFIGS / "montecarlo_quartic.toml")
    assert cli.main(["--config", cfg, "--out", str(tmp_path / "a"), "--quiet"]) == 0
    assert cli.main(["--config", cfg, "--out", str(tmp_path / "b"), "--quiet", "--threads", "3"]) == 0
    assert (tmp_path / "a" / "endpoints.csv").read_bytes() == (tmp_path / "b" / "endpoints.csv").read_bytes()
    s = summary(tmp_path / "a")
    assert s["checks"]["no_saddle_convergence"]


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert cli.main(["--config", str(CONFIGS / "counterexample.toml"), "--quiet"]) == 0
    assert (tmp_path / "env" / "summary.json").exists()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dgflow", "--config", str(CONFIGS / "bad_schedule.toml"),
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 2 and "A.6" in proc.stderr
