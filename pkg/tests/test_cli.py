import json
import subprocess
import sys

import pytest

from ridegp.cli import build_parser, main
from ridegp.kernels import parse_kernel_spec
from ridegp.market import load_grid

SMALL = ["--rows", "3", "--cols", "3", "--intervals", "6", "--n-days", "2"]


def run(*argv):
    return main([str(a) for a in argv])


def read(path):
    return path.read_bytes()


@pytest.fixture
def generated(tmp_path):
    out = tmp_path / "gen"
    assert run("generate", "--seed", 7, "--out-dir", out, *SMALL) == 0
    return out


def test_generate_files(generated):
    assert sorted(p.name for p in generated.iterdir()) == ["grid_config.json", "orders.csv", "panel.csv", "truth.json"]
    assert json.loads((generated / "truth.json").read_text())["seed"] == 7


def test_generate_deterministic(generated, tmp_path):
    again = tmp_path / "again"
    run("generate", "--seed", 7, "--out-dir", again, *SMALL)
    for name in ("grid_config.json", "orders.csv", "panel.csv", "truth.json"):
        assert read(generated / name) == read(again / name)


def test_aggregate_closure(generated, tmp_path):
    out = tmp_path / "agg.csv"
    assert run("aggregate", "--orders", generated / "orders.csv", "--config", generated / "grid_config.json",
               "--out", out, "--report", tmp_path / "rep.json") == 0
    assert read(out) == read(generated / "panel.csv")
    rep = json.loads((tmp_path / "rep.json").read_text())
    assert rep["malformed"] == []


def test_train_predict(generated, tmp_path):
    model = tmp_path / "m.json"
    assert run("train", "--panel", generated / "panel.csv", "--out", model, "--report", tmp_path / "r.json",
               "--kernel", "AGPM5", "--restarts", 1, "--max-iters", 3, "--init-preset", "matching") == 0
    doc = json.loads(model.read_text())
    assert parse_kernel_spec(doc["kernel_spec"]) == parse_kernel_spec("AGPM5")
    assert len(json.loads((tmp_path / "r.json").read_text())["per_restart"]) == 1
    pred = tmp_path / "p.csv"
    assert run("predict", "--model", model, "--panel", generated / "panel.csv", "--out", pred) == 0
    lines = pred.read_text().splitlines()
    assert lines[0] == "day,r,c,t,mean,variance" and len(lines) == 1 + 2 * 9 * 6


def test_train_baseline(generated, tmp_path):
    assert run("train", "--panel", generated / "panel.csv", "--out", tmp_path / "m.json", "--model", "spmq") == 0
    assert json.loads((tmp_path / "m.json").read_text())["model_kind"] == "spmq"
    assert run("predict", "--model", tmp_path / "m.json", "--panel", generated / "panel.csv",
               "--out", tmp_path / "p.csv") == 0


def test_evaluate(tmp_path, capsys):
    run("generate", "--seed", 3, "--out-dir", tmp_path, "--generator", "cdmf", *SMALL)
    capsys.readouterr()
    assert run("evaluate", "--panel", tmp_path / "panel.csv", "--out", tmp_path / "e.json", "--model", "cdmf",
               "--scatter", tmp_path / "s.csv") == 0
    doc = json.loads((tmp_path / "e.json").read_text())
    assert len(doc["per_fold"]) == 2
    assert json.loads(capsys.readouterr().out) == doc["averaged"]


def test_pmq_pickups(generated, tmp_path, capsys):
    code = run("evaluate", "--panel", generated / "panel.csv", "--out", tmp_path / "e.json",
               "--model", "pmq", "--target", "pickups")
    err = capsys.readouterr().err.strip()
    assert code != 0
    assert len(err.splitlines()) == 1 and "no pickup results" in err


def test_strategize(generated, tmp_path):
    model = tmp_path / "m.json"
    theta = ",".join(str(v) for v in [5.4, 7.4, 20.9, 19.9, 1.6, 0.2, 41.9, 12.3, 5.1])
    run("train", "--panel", generated / "panel.csv", "--out", model, "--theta", theta)
    q0 = tmp_path / "q0.csv"
    q0.write_text("r,c,q0\n1,1,3\n2,2,1.5\n")
    args = ["strategize", "--model", model, "--panel", generated / "panel.csv", "--strategy", "CS",
            "--q0", q0, "--window", 3, "--cs-threshold", 5]
    assert run(*args, "--out", tmp_path / "a.json", "--metrics", tmp_path / "a.csv") == 0
    assert run(*args, "--out", tmp_path / "b.json", "--metrics", tmp_path / "b.csv") == 0
    assert read(tmp_path / "a.json") == read(tmp_path / "b.json")
    assert read(tmp_path / "a.csv") == read(tmp_path / "b.csv")
    assert json.loads((tmp_path / "a.json").read_text())["kind"] == "CS"


def test_strategize_needs_gp(generated, tmp_path, capsys):
    run("train", "--panel", generated / "panel.csv", "--out", tmp_path / "m.json", "--model", "pmq")
    code = run("strategize", "--model", tmp_path / "m.json", "--panel", generated / "panel.csv",
               "--strategy", "QS", "--out", tmp_path / "s.json", "--metrics", tmp_path / "s.csv")
    assert code == 1 and "agpm" in capsys.readouterr().err


def test_bad_kernel(generated, tmp_path, capsys):
    code = run("train", "--panel", generated / "panel.csv", "--out", tmp_path / "m.json", "--kernel", "SE(r,r)")
    assert code == 1 and "duplicate covariate" in capsys.readouterr().err


def test_missing_file(tmp_path, capsys):
    assert run("predict", "--model", tmp_path / "none.json", "--panel", tmp_path / "none.csv",
               "--out", tmp_path / "p.csv") == 1
    assert capsys.readouterr().err.startswith("ridegp predict: error:")


def test_help_lists_every_subcommand():
    text = build_parser().format_help()
    for cmd in ("generate", "aggregate", "train", "predict", "evaluate", "strategize"):
        assert cmd in text


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ridegp", "generate", "--seed", "1", "--out-dir", str(tmp_path),
                           *SMALL], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert load_grid(tmp_path / "panel.csv").n_days == 2
