import json
import subprocess
import sys

import numpy as np
import pytest

from migractl import dynamics as D
from migractl.cli import read_init, run, write_init
from migractl.model import Ensemble


def call(capsys, *argv):
    code = run(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_plan2(capsys):
    code, out, _ = call(capsys, "plan2", "--xi1", "1.5", "--xi2", "0.5", "--m", "1", "--horizon", "2")
    assert code == 0
    doc = json.loads(out)
    assert doc["regime"]["t0"] == pytest.approx(0.81093, abs=1e-5)
    assert len(doc["plan"]["pieces"]) == 2


def test_simulate_zero_on_consensus(tmp_path, capsys):
    init = tmp_path / "init.csv"
    init.write_text(write_init(np.full(4, 0.3)))
    code, out, _ = call(capsys, "simulate", "--init", f"file:{init}", "--horizon", "1",
                        "--dt", "0.1", "--strategy", "zero")
    assert code == 0
    tr = D.trajectory_from_csv(out)
    np.testing.assert_allclose(tr.values, 0.09, atol=1e-15)


def test_simulate_roundtrip_and_pmp(tmp_path, capsys):
    init = tmp_path / "init.csv"
    init.write_text(write_init(np.array([0.5, 1.5, 1.0])))
    traj = tmp_path / "traj.csv"
    code, _, _ = call(capsys, "simulate", "--init", f"file:{init}", "--horizon", "2",
                      "--strategy", "full", "--out", str(traj))
    assert code == 0
    tr = D.trajectory_from_csv(traj.read_text())
    # columns stay in input order: agent 2 leads
    np.testing.assert_array_equal(tr.controls[0], [0, 1, 0])
    code, out, _ = call(capsys, "pmp-check", "--traj", str(traj), "--cost", "final", "--m", "1")
    assert code == 0
    assert json.loads(out)["consistent"] is True


def test_simulate_full_mode(tmp_path, capsys):
    init = tmp_path / "ens.csv"
    ens = Ensemble([[0, 0], [1, 0], [0, 1]], [[1.0, 0.2], [0.3, -0.1], [-0.5, 0.4]], [0, 0])
    init.write_text(write_init(ens))
    assert isinstance(read_init(init.read_text()), Ensemble)
    code, out, _ = call(capsys, "simulate", "--init", f"file:{init}", "--horizon", "1",
                        "--strategy", "instant", "--dt", "0.05")
    assert code == 0
    assert D.trajectory_from_csv(out).n == 3


def test_simulate_plan_file(tmp_path, capsys):
    plan = tmp_path / "plan.json"
    code, out, _ = call(capsys, "plan2", "--xi1", "1.5", "--xi2", "0.5", "--horizon", "2")
    plan.write_text(json.dumps(json.loads(out)["plan"]))
    init = tmp_path / "init.csv"
    init.write_text(write_init(np.array([1.5, 0.5])))
    code, out, _ = call(capsys, "simulate", "--init", f"file:{init}", "--horizon", "2",
                        "--strategy", f"plan:{plan}")
    assert code == 0
    assert np.ptp(D.trajectory_from_csv(out).final) < 1e-9


def test_stages_and_scan(tmp_path, capsys):
    init = tmp_path / "init.csv"
    init.write_text(write_init(np.array([1.5, 1.0, 0.5])))
    code, out, _ = call(capsys, "stages", "--init", f"file:{init}")
    np.testing.assert_allclose(json.loads(out)["switch_times"], [0, 1.5 * np.log(4 / 3), 1.5 * np.log(2)])
    code, out, _ = call(capsys, "scan-delta", "--init", f"file:{init}", "--horizon", "3", "--grid", "64")
    assert code == 0
    assert json.loads(out)["delta"] == 0.0


def test_table1_one_row(tmp_path, capsys):
    out = tmp_path / "t1.csv"
    code, _, _ = call(capsys, "table1", "--agents", "5", "--horizons", "3", "--trials", "1000",
                      "--seed", "42", "--threads", "1", "--out", str(out))
    assert code == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 2
    assert lines[0] == "n_agents,horizon,trials,seed,inactivation_percent,stderr_percent"
    pct, se = map(float, lines[1].split(",")[4:])
    assert 0 <= pct <= 100 and se >= 0


def test_table2_and_figures(tmp_path, capsys):
    figs = tmp_path / "figs"
    code, out, _ = call(capsys, "table2", "--agents", "3,4", "--horizons", "2", "--trials", "20",
                        "--threads", "1", "--figures", str(figs), "--json", str(tmp_path / "t2.json"))
    assert code == 0
    assert (figs / "table2.png").stat().st_size > 0
    assert json.loads((tmp_path / "t2.json").read_text())["kind"] == "table2"


def test_figures_for_simulate_and_ratio(tmp_path, capsys):
    figs = tmp_path / "figs"
    assert call(capsys, "simulate", "--n", "4", "--horizon", "1", "--dt", "0.05",
                "--strategy", "inactivation", "--figures", str(figs))[0] == 0
    assert call(capsys, "ratio", "--n", "4", "--horizon", "3", "--trials", "30",
                "--figures", str(figs))[0] == 0
    assert call(capsys, "scan-delta", "--n", "4", "--horizon", "3", "--grid", "32",
                "--figures", str(figs))[0] == 0
    for name in ("trajectory.png", "ratio.png", "delta_scan.png"):
        assert (figs / name).stat().st_size > 0


def test_oracle_command(capsys):
    code, out, _ = call(capsys, "oracle", "--n", "3", "--horizon", "2", "--samples", "200", "--pieces", "3")
    assert code == 0
    doc = json.loads(out)
    assert doc["best_value"] <= min(doc["candidate_values"].values())


def test_identical_args_identical_output(capsys):
    args = ["simulate", "--n", "5", "--seed", "9", "--horizon", "1", "--strategy", "integral"]
    assert call(capsys, *args)[1] == call(capsys, *args)[1]


def test_bad_arguments_exit_2(capsys):
    assert call(capsys, "nope")[0] == 2
    assert call(capsys, "plan2", "--xi1", "x", "--xi2", "0", "--horizon", "1")[0] == 2
    assert call(capsys, "simulate", "--horizon", "1", "--strategy", "wild")[0] == 2
    assert call(capsys, "simulate", "--horizon", "1", "--init", "somewhere")[0] == 2


@pytest.mark.parametrize("argv, name", [
    (["plan2", "--xi1", "0.2", "--xi2", "-0.6", "--horizon", "1"], "NonPositiveMean"),
    (["simulate", "--horizon", "1", "--strategy", "zero", "--m", "0.5", "--init", "INIT"], "DegenerateMean"),
])
def test_domain_errors_exit_1(tmp_path, capsys, argv, name):
    init = tmp_path / "e.csv"
    init.write_text("x_1,v_1\n0,1\n0,-1\n")
    argv = [a.replace("INIT", f"file:{init}") for a in argv]
    code, _, err = call(capsys, *argv)
    assert code == 1
    assert name in err


def test_inadmissible_plan_exit_1(tmp_path, capsys):
    plan = tmp_path / "p.json"
    plan.write_text(json.dumps({"budget": 1.0, "horizon": 1.0,
                                "pieces": [{"t0": 0, "t1": 1, "alpha": [1.0, 1.0]}]}))
    code, _, err = call(capsys, "simulate", "--n", "2", "--horizon", "1", "--strategy", f"plan:{plan}")
    assert code == 1
    assert "InadmissibleControl" in err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "migractl", "plan2", "--xi1", "1", "--xi2", "0.5",
                           "--m", "2", "--horizon", "1"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["regime"]["case_id"] == "M2_both_positive"
