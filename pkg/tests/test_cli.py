import json
import os

import pytest

from mtopt.cli import main

TRIAD_CFG = """\
# quick triad run
benchmark.kind = regression
regression.preset = triad
method = SELECTIVE
iters = 25
eta = 0.05
beta = 0.01
model.width = 8
model.depth = 2
batch.size = 16
seed = 1
"""


def write_cfg(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


def test_run_writes_four_log_files(tmp_path, capsys):
    cfg = write_cfg(tmp_path, TRIAD_CFG)
    out = str(tmp_path / "run1")
    assert main(["run", "--config", cfg, "--out", out]) == 0
    for name in ("steps.csv", "affinity.csv", "groups.csv", "summary.json", "config.json"):
        assert os.path.exists(os.path.join(out, name)), name
    with open(os.path.join(out, "steps.csv")) as fh:
        assert fh.readline().startswith("# schema=")


def test_run_rejects_bad_beta_naming_field(tmp_path, capsys):
    cfg = write_cfg(tmp_path, TRIAD_CFG + "\nbeta = 1.5\n")
    code = main(["run", "--config", cfg, "--out", str(tmp_path / "x")])
    assert code == 2
    # duplicate key also caught; rewrite without the original beta line
    cfg2 = write_cfg(tmp_path, TRIAD_CFG.replace("beta = 0.01", "beta = 1.5"), "b.cfg")
    code = main(["run", "--config", cfg2, "--out", str(tmp_path / "x")])
    assert code == 2
    assert "beta" in capsys.readouterr().err


def test_run_unknown_key_rejected(tmp_path, capsys):
    cfg = write_cfg(tmp_path, TRIAD_CFG + "\nnot.a.key = 1\n")
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "x")]) == 2
    assert "not.a.key" in capsys.readouterr().err


def test_run_numeric_blowup_exits_3_with_iteration(tmp_path, capsys):
    cfg = write_cfg(tmp_path, TRIAD_CFG.replace("eta = 0.05", "eta = 1e6")
                    .replace("iters = 25", "iters = 300"))
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "x")]) == 3
    assert "iteration" in capsys.readouterr().err


def test_rerun_reproduces_csv_bytes(tmp_path):
    cfg = write_cfg(tmp_path, TRIAD_CFG)
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(["run", "--config", cfg, "--out", a]) == 0
    assert main(["run", "--config", cfg, "--out", b]) == 0
    for name in ("steps.csv", "affinity.csv", "groups.csv", "summary.json"):
        assert read(os.path.join(a, name)) == read(os.path.join(b, name)), name


def test_seed_and_method_overrides_reach_config_echo(tmp_path):
    cfg = write_cfg(tmp_path, TRIAD_CFG)
    out = str(tmp_path / "o")
    assert main(["run", "--config", cfg, "--out", out, "--seed", "7",
                 "--method", "JOINT"]) == 0
    echo = json.load(open(os.path.join(out, "config.json")))
    assert echo["config"]["seed"] == "7"
    assert echo["config"]["method"] == "JOINT"
    summary = json.load(open(os.path.join(out, "summary.json")))
    assert summary["method"] == "JOINT" and summary["seed"] == 7


SWEEP_CFG = TRIAD_CFG + """\
sweep.method = JOINT,SEPARATE,SELECTIVE
sweep.seed = 1,2,3
"""


def test_sweep_expands_grid_and_writes_index(tmp_path):
    cfg = write_cfg(tmp_path, SWEEP_CFG, "sweep.cfg")
    out = str(tmp_path / "sweep")
    assert main(["sweep", "--config", cfg, "--out", out]) == 0
    cells = [d for d in os.listdir(out) if os.path.isdir(os.path.join(out, d))]
    assert len(cells) == 9
    with open(os.path.join(out, "index.csv")) as fh:
        lines = fh.read().splitlines()
    assert lines[0].startswith("# schema=") and len(lines) == 2 + 9
    assert all(line.endswith(",ok") for line in lines[2:])


def test_sweep_resume_keeps_completed_cells(tmp_path, capsys):
    cfg = write_cfg(tmp_path, SWEEP_CFG, "sweep.cfg")
    out = str(tmp_path / "sweep")
    assert main(["sweep", "--config", cfg, "--out", out]) == 0
    assert main(["sweep", "--config", cfg, "--out", out, "--resume"]) == 0
    with open(os.path.join(out, "index.csv")) as fh:
        body = fh.read()
    assert body.count(",kept") == 9


def test_sweep_without_axes_is_usage_error(tmp_path, capsys):
    cfg = write_cfg(tmp_path, TRIAD_CFG)
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "s")]) == 2
    assert "sweep" in capsys.readouterr().err


def test_report_run_against_itself_is_zero(tmp_path, capsys):
    cfg = write_cfg(tmp_path, TRIAD_CFG)
    out = str(tmp_path / "r")
    assert main(["run", "--config", cfg, "--out", out]) == 0
    rep = str(tmp_path / "rep")
    assert main(["report", out, "--baseline", out, "--out", rep]) == 0
    assert "delta_m +0.000%" in capsys.readouterr().out
    with open(os.path.join(rep, "report.csv")) as fh:
        lines = fh.read().splitlines()
    assert lines[2].split(",")[3] == "0"


def test_report_missing_directory_exits_2(tmp_path, capsys):
    cfg = write_cfg(tmp_path, TRIAD_CFG)
    out = str(tmp_path / "r")
    assert main(["run", "--config", cfg, "--out", out]) == 0
    assert main(["report", out, "--baseline", str(tmp_path / "nope")]) == 2


def test_verify_small_instances_pass(tmp_path, capsys):
    rep = str(tmp_path / "verify.json")
    code = main(["verify", "--suites", "T1,T3,A1", "--instances", "10",
                 "--seed", "0", "--out", rep])
    assert code == 0
    payload = json.load(open(rep))
    assert set(payload["suites"]) == {"T1", "T3", "A1"}
    assert all(s["violations"] == 0 for s in payload["suites"].values())


def test_verify_zero_instances_is_usage_error():
    assert main(["verify", "--instances", "0"]) == 2


def test_verify_corrupted_margin_exits_1(capsys):
    code = main(["verify", "--suites", "T3", "--instances", "5",
                 "--margin-scale", "1e-4"])
    assert code == 1
    assert "FAIL" in capsys.readouterr().out


def test_verify_unknown_suite_is_usage_error(capsys):
    assert main(["verify", "--suites", "T7"]) == 2


def test_single_method_produces_per_task_baselines(tmp_path):
    cfg = write_cfg(tmp_path, TRIAD_CFG.replace("method = SELECTIVE", "method = SINGLE"))
    out = str(tmp_path / "single")
    assert main(["run", "--config", cfg, "--out", out]) == 0
    summary = json.load(open(os.path.join(out, "summary.json")))
    assert summary["method"] == "SINGLE"
    assert sorted(summary["runs"]) == ["task1", "task2", "task3"]
    assert sorted(summary["eval_losses"]) == ["1", "2", "3"]
