import json

import numpy as np
import pytest

from partial_bsde import cli
from partial_bsde.market import THREADS_ENV
from partial_bsde.scenario import parse_scenario

SCENARIO = """
[market]
n_steps = 16
n_paths = 3000
lambda_per_time = 1.0

[market.jump_marks]
kind = "uniform"
params = [-0.2, 0.2]

[market.alpha]
kind = "constant"
value = 0.2

[info]
kind = "delayed"
tau_time = 0.25

[claim]
name = "power"
exponent = 2.0
underlying = "M"

[bsde]
driver = "follmer_schweizer"

[run]
seed = 99
partition_steps = 4
"""


@pytest.fixture
def scenario_file(tmp_path):
    p = tmp_path / "s.toml"
    p.write_text(SCENARIO)
    return p


def run_cli(capsys, *args):
    code = cli.main([str(a) for a in args])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_validate_writes_report(scenario_file, tmp_path, capsys):
    out = tmp_path / "out"
    code, stdout, _ = run_cli(capsys, "validate", scenario_file, "--output-dir", out)
    h = parse_scenario(SCENARIO).hash()
    assert code in (0, 1)
    assert f"[{h}]" in stdout
    report = json.loads((out / f"report_validate_{h}.json").read_text())
    assert report["scenario_hash"] == h
    assert report["passed"] == (code == 0)
    names = [c["name"] for c in report["checks"]]
    assert len(names) == len(set(names))
    for prefix in ("market.", "solve.", "decompose.gkw.", "decompose.fs.", "hedge.", "mmm.", "collapse."):
        assert any(n.startswith(prefix) for n in names), prefix
    # exact identities hold at any sample size
    exact = {c["name"]: c for c in report["checks"]}
    for name in ("solve.terminal_condition", "solve.recursion_identity", "hedge.replication", "hedge.cost_identity",
                 "market.structure_condition"):
        assert exact[name]["pass"], name
    assert "timings" not in report
    assert json.loads((out / f"timings_validate_{h}.json").read_text())
    assert (out / f"validate_{h}_solution.csv").exists()


def test_outputs_are_deterministic(scenario_file, tmp_path, capsys, monkeypatch):
    dirs = []
    for k, threads in enumerate(("1", "3")):
        monkeypatch.setenv(THREADS_ENV, threads)
        d = tmp_path / f"run{k}"
        run_cli(capsys, "hedge", scenario_file, "--output-dir", d, "--paths", 2100)
        dirs.append(d)
    files = sorted(p.name for p in dirs[0].iterdir() if not p.name.startswith("timings"))
    assert files == sorted(p.name for p in dirs[1].iterdir() if not p.name.startswith("timings"))
    for name in files:
        assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes(), name


def test_overrides_change_hash(scenario_file, tmp_path, capsys):
    _, a, _ = run_cli(capsys, "simulate", scenario_file, "--output-dir", tmp_path / "a")
    _, b, _ = run_cli(capsys, "simulate", scenario_file, "--output-dir", tmp_path / "b", "--seed", 100)
    assert a.split("[")[-1] != b.split("[")[-1]


def test_simulate_exports_ensemble(scenario_file, tmp_path, capsys):
    out = tmp_path / "o"
    code, _, _ = run_cli(capsys, "simulate", scenario_file, "--output-dir", out, "--paths", 50, "--steps", 8)
    assert code == 0
    (csv,) = out.glob("ensemble_*.csv")
    data = np.loadtxt(csv, delimiter=",", skiprows=1)
    assert csv.read_text().splitlines()[0] == "path,step,M,bracket,S"
    assert data.shape == (50 * 9, 5)
    assert set(data[:, 1].astype(int)) == set(range(9))


def test_solution_csv_round_trips(scenario_file, tmp_path, capsys):
    out = tmp_path / "o"
    run_cli(capsys, "solve", scenario_file, "--output-dir", out, "--paths", 200)
    (csv,) = out.glob("solve_*_solution.csv")
    data = np.genfromtxt(csv, delimiter=",", skip_header=1)
    assert data.shape == (200 * 17, 5)
    last = data[data[:, 1] == 16]
    assert np.isnan(last[:, 3]).all() and np.isnan(last[:, 4]).all()


@pytest.mark.parametrize("sub", ["decompose", "mmm"])
def test_other_subcommands(sub, scenario_file, tmp_path, capsys):
    code, stdout, _ = run_cli(capsys, sub, scenario_file, "--output-dir", tmp_path, "--paths", 1500)
    assert code in (0, 1)
    assert "PASS" in stdout


def test_scenario_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text(SCENARIO.replace("n_steps = 16", "n_steps = 16\nbogus = 1"))
    code, _, err = run_cli(capsys, "solve", bad, "--output-dir", tmp_path)
    assert code == 2 and "market: unknown field(s) bogus" in err
    code, _, err = run_cli(capsys, "solve", tmp_path / "missing.toml")
    assert code == 2 and "scenario error" in err


def test_numeric_errors_exit_2(tmp_path, capsys):
    # 1 - alpha dM <= 0 on some paths and no tolerance for it
    p = tmp_path / "neg.toml"
    p.write_text(
        SCENARIO.replace('kind = "uniform"\nparams = [-0.2, 0.2]', 'kind = "constant"\nparams = [0.9]')
        .replace("value = 0.2", "value = 2.0")
    )
    code, _, err = run_cli(capsys, "mmm", p, "--output-dir", tmp_path, "--paths", 500)
    assert code == 2 and "not equivalent" in err


def test_unknown_subcommand():
    with pytest.raises(SystemExit):
        cli.main(["price", "x.toml"])
    with pytest.raises(ValueError):
        cli.run("x.toml", "price")


def test_report_rejects_duplicate_checks():
    from partial_bsde.checks import at_most

    r = cli.RunReport("h", "solve")
    r.add(at_most("a", 0.0, 1.0))
    with pytest.raises(RuntimeError, match="twice"):
        r.add(at_most("a", 0.0, 1.0))
