"""Command-line pipelines: exit codes, artifact schemas, reproducibility."""

import csv
import hashlib
import json

import pytest

from perturbwalk import cli

BASE = """\
[model]
kind = "independent_flip"
rho = 0.5
dim = 1
side = 4

[rates]
family = "interface"
strength = 0.05

[run]
seed = 2024
tolerance = 1e-9
expansion_order = 3
check_functions = 10
"""


def _write(tmp_path, text, name="exp.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def _run(mode, cfg_path, out, extra=()):
    return cli.main([mode, "--config", str(cfg_path), "--out", str(out),
                     *extra])


# ---------------------------------------------------------------------------
# Oracle pipeline
# ---------------------------------------------------------------------------


def test_oracle_pipeline_artifacts(tmp_path):
    cfg = _write(tmp_path, BASE)
    out = tmp_path / "out"
    assert _run("oracle", cfg, out) == 0
    for name in ("manifest.json", "checks.json", "oracle.json", "decay.csv"):
        assert (out / name).exists()

    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["schema_version"] == 1
    assert manifest["command"] == "oracle"
    assert manifest["seed"] == 2024
    digest = hashlib.sha256(cfg.read_bytes()).hexdigest()
    assert manifest["config_sha256"] == digest
    assert "timestamp" not in manifest

    checks = json.loads((out / "checks.json").read_text())
    assert len(checks) > 100
    for rec in checks:
        assert set(rec) == {"check_id", "paper_anchor", "lhs", "rhs",
                            "pass", "tolerance"}
        assert rec["pass"] is True

    summary = json.loads((out / "oracle.json").read_text())
    assert summary["gamma"] == pytest.approx(1.0, abs=1e-9)
    assert summary["epsilon"] == pytest.approx(0.1, abs=1e-9)


def test_oracle_decay_csv_is_crlf(tmp_path):
    cfg = _write(tmp_path, BASE)
    out = tmp_path / "out"
    assert _run("oracle", cfg, out) == 0
    raw = (out / "decay.csv").read_bytes()
    assert b"\r\n" in raw
    assert b"\n" not in raw.replace(b"\r\n", b"")
    rows = list(csv.reader((out / "decay.csv").read_text().splitlines()))
    assert rows[0][0] == "distance"
    assert len(rows) > 1


def test_oracle_rerun_is_byte_identical(tmp_path):
    cfg = _write(tmp_path, BASE)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert _run("oracle", cfg, out1) == 0
    assert _run("oracle", cfg, out2) == 0
    for name in ("manifest.json", "checks.json", "oracle.json", "decay.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_seed_flag_overrides_config(tmp_path):
    cfg = _write(tmp_path, BASE)
    out = tmp_path / "out"
    assert _run("oracle", cfg, out, extra=("--seed", "5")) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 5


# ---------------------------------------------------------------------------
# Exit codes
# ---------------------------------------------------------------------------


def test_missing_field_exits_2_with_line_anchor(tmp_path, capsys):
    text = BASE.replace("tolerance = 1e-9\n", "")
    cfg = _write(tmp_path, text)
    assert _run("oracle", cfg, tmp_path / "out") == 2
    err = capsys.readouterr().err
    assert "tolerance" in err
    assert f"{cfg}" in err or cfg.name in err


def test_toml_parse_error_exits_2(tmp_path):
    cfg = _write(tmp_path, "[model\nkind=")
    assert _run("oracle", cfg, tmp_path / "out") == 2


def test_unknown_key_exits_2(tmp_path, capsys):
    cfg = _write(tmp_path, BASE + "\n[model2]\nx = 1\n")
    assert _run("oracle", cfg, tmp_path / "out") == 2
    cfg2 = _write(tmp_path, BASE.replace('kind = "independent_flip"',
                                         'kind = "independent_flip"\nwat = 3'),
                  name="exp2.toml")
    assert _run("oracle", cfg2, tmp_path / "out2") == 2
    assert "wat" in capsys.readouterr().err


def test_mode_mismatch_exits_2(tmp_path):
    cfg = _write(tmp_path, BASE + 'mode = "simulate"\n')
    assert _run("oracle", cfg, tmp_path / "out") == 2


def test_compare_torus_mismatch_exits_2(tmp_path, capsys):
    text = BASE + """\
horizon = 10.0
replicas = 50

[oracle]
side = 4

[simulate]
side = 8
"""
    cfg = _write(tmp_path, text)
    assert _run("compare", cfg, tmp_path / "out") == 2
    assert "side" in capsys.readouterr().err


def test_perturbation_at_gap_exits_3(tmp_path, capsys):
    text = BASE.replace('kind = "independent_flip"', 'kind = "east"') \
               .replace("side = 4", "side = 5")
    cfg = _write(tmp_path, text)
    assert _run("oracle", cfg, tmp_path / "out") == 3
    assert "perturbation-below-gap" in capsys.readouterr().err


def test_failed_check_exits_1_but_writes_artifacts(tmp_path, capsys):
    text = BASE.replace("tolerance = 1e-9", "tolerance = -1e6")
    cfg = _write(tmp_path, text)
    out = tmp_path / "out"
    assert _run("oracle", cfg, out) == 1
    # artifacts land on disk before the failure is raised
    assert (out / "checks.json").exists()
    checks = json.loads((out / "checks.json").read_text())
    assert any(not rec["pass"] for rec in checks)
    assert "check failed" in capsys.readouterr().err


def test_unknown_cli_arguments_exit_2(tmp_path):
    assert cli.main(["oracle", "--config"]) == 2
    assert cli.main(["frobnicate"]) == 2


def test_help_and_version_exit_0():
    assert cli.main(["--help"]) == 0
    assert cli.main(["--version"]) == 0


# ---------------------------------------------------------------------------
# Simulate pipeline
# ---------------------------------------------------------------------------

SIM = """\
[model]
kind = "independent_flip"
rho = 0.4
dim = 1
side = 4

[rates]
family = "interface"
strength = 0.1

[run]
seed = 31
tolerance = 1e-9
horizon = 8.0
replicas = 60
burn_in = 2.0
"""


def test_simulate_pipeline(tmp_path):
    cfg = _write(tmp_path, SIM)
    out = tmp_path / "out"
    assert _run("simulate", cfg, out) == 0
    summary = json.loads((out / "simulate.json").read_text())
    assert summary["replicas"] == 60
    assert summary["velocity_compensated"]["se"][0] > 0
    assert summary["separation"]["bound"] > 0
    checks = json.loads((out / "checks.json").read_text())
    assert any(rec["check_id"].startswith("decoupling-rate-bound")
               for rec in checks)


def test_simulate_requires_burn_in(tmp_path):
    cfg = _write(tmp_path, SIM.replace("burn_in = 2.0\n", ""))
    assert _run("simulate", cfg, tmp_path / "out") == 2


def test_simulate_dump_paths(tmp_path):
    cfg = _write(tmp_path, SIM)
    out = tmp_path / "out"
    assert _run("simulate", cfg, out, extra=("--dump-paths",)) == 0
    raw = (out / "paths.csv").read_bytes()
    assert b"\r\n" in raw
    rows = list(csv.reader((out / "paths.csv").read_text().splitlines()))
    assert rows[0][0] == "replica"
    assert len(rows) == 1 + 60


def test_simulate_threads_byte_identical(tmp_path):
    cfg = _write(tmp_path, SIM)
    out1, out4 = tmp_path / "t1", tmp_path / "t4"
    assert _run("simulate", cfg, out1) == 0
    assert _run("simulate", cfg, out4, extra=("--threads", "4")) == 0
    for name in ("checks.json", "simulate.json"):
        assert (out1 / name).read_bytes() == (out4 / name).read_bytes()
    m1 = json.loads((out1 / "manifest.json").read_text())
    m4 = json.loads((out4 / "manifest.json").read_text())
    assert m1["threads"] == 1 and m4["threads"] == 4


# ---------------------------------------------------------------------------
# Compare pipeline
# ---------------------------------------------------------------------------


def test_compare_pipeline(tmp_path):
    text = BASE + """\
horizon = 30.0
replicas = 120
"""
    cfg = _write(tmp_path, text)
    out = tmp_path / "out"
    assert _run("compare", cfg, out) == 0
    summary = json.loads((out / "compare.json").read_text())
    assert summary["occupation_tv"] < 0.2
    checks = json.loads((out / "checks.json").read_text())
    ids = {rec["check_id"] for rec in checks}
    assert any(i.startswith("mc-velocity-vs-exact") for i in ids)
    assert any(i.startswith("mc-diffusion-lower-bound") for i in ids)
    assert all(rec["pass"] for rec in checks)


# ---------------------------------------------------------------------------
# Sweep pipeline
# ---------------------------------------------------------------------------


def test_sweep_pipeline(tmp_path):
    text = BASE + """\
horizon = 10.0

[sweep]
strengths = [0.02, 0.05, 0.1]
replicas = 0
"""
    cfg = _write(tmp_path, text)
    out = tmp_path / "out"
    assert _run("sweep", cfg, out) == 0
    raw = (out / "sweep.csv").read_bytes()
    assert b"\r\n" in raw
    rows = list(csv.reader((out / "sweep.csv").read_text().splitlines()))
    assert rows[0][:4] == ["strength", "epsilon", "gamma", "v_exact"]
    assert len(rows) == 1 + 3
    summary = json.loads((out / "sweep.json").read_text())
    assert summary["abs_velocity_monotone"] is True


def test_sweep_with_monte_carlo_rows(tmp_path):
    text = BASE + """\
horizon = 10.0

[sweep]
strengths = [0.05, 0.1]
replicas = 40
"""
    cfg = _write(tmp_path, text)
    out = tmp_path / "out"
    assert _run("sweep", cfg, out) == 0
    rows = list(csv.reader((out / "sweep.csv").read_text().splitlines()))
    header = rows[0]
    i_mc = header.index("v_mc")
    assert all(row[i_mc] != "" for row in rows[1:])
    checks = json.loads((out / "checks.json").read_text())
    assert any(rec["check_id"].startswith("mc-velocity-vs-exact")
               for rec in checks)
