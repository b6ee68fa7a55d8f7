import csv

import numpy as np
import pytest

from neuromhe.checks import linear_fit_r2
from neuromhe.cli import main
from neuromhe.neuro import init_mlp, save_checkpoint


def _csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config-hash: ")
    return list(csv.DictReader(lines[1:]))


def test_usage_errors(capsys):
    assert main([]) == 2
    assert main(["train", "--bogus"]) == 2
    assert main(["train", "--scenario", "moon"]) == 2
    assert "unknown scenario" in capsys.readouterr().err
    assert main(["evaluate", "--checkpoint", "a", "--baseline", "zero"]) == 2


def test_missing_config_is_usage_error(tmp_path):
    assert main(["gradcheck", "--config", str(tmp_path / "none.ini")]) == 2


def test_gradcheck_pass_and_corrupt(capsys):
    assert main(["gradcheck", "--instances", "6"]) == 0
    out = capsys.readouterr().out
    assert "KF vs dense: max rel err" in out and "< 1e-8: PASS" in out
    assert main(["gradcheck", "--instances", "2", "--corrupt"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_train_rl_and_evaluate(tmp_path, capsys):
    out = tmp_path / "rl"
    assert main(["train", "--mode", "rl", "--episodes", "1", "--duration", "6",
                 "--out", str(out), "--quiet"]) == 0
    assert "final L_mean=" in capsys.readouterr().out
    rows = _csv(out / "metrics.csv")
    assert len(rows) == 1 and float(rows[0]["L_mean"]) > 0
    ev = tmp_path / "ev"
    assert main(["evaluate", "--checkpoint", str(out / "checkpoint.npz"), "--duration", "6",
                 "--eval-episodes", "2", "--out", str(ev)]) == 0
    rows = _csv(ev / "eval.csv")
    assert [r["estimator"] for r in rows] == ["neuromhe"] * 2
    assert (ev / "trace.csv").read_text().startswith("# config-hash: ")


def test_train_dmhe_writes_raw_vector(tmp_path):
    out = tmp_path / "dm"
    assert main(["train", "--mode", "dmhe", "--episodes", "1", "--duration", "6",
                 "--out", str(out), "--quiet"]) == 0
    assert main(["evaluate", "--dmhe", str(out / "dmhe.npz"), "--duration", "6",
                 "--eval-episodes", "1", "--out", str(tmp_path / "e")]) == 0
    # a DMHE file is not a network checkpoint
    assert main(["evaluate", "--checkpoint", str(out / "dmhe.npz"), "--out", str(tmp_path)]) == 2


def test_incompatible_checkpoint(tmp_path, capsys):
    p = save_checkpoint(tmp_path / "small.npz", init_mlp(4, 3, hidden=(5, 5), seed=0))
    assert main(["evaluate", "--checkpoint", str(p), "--out", str(tmp_path)]) == 2
    assert "incompatible checkpoint" in capsys.readouterr().err


def test_simulate_dataset_and_supervised(tmp_path):
    assert main(["simulate", "--scenario", "step-sine", "--dataset", "--duration", "0.3",
                 "--out", str(tmp_path)]) == 0
    data = tmp_path / "flight.csv"
    assert main(["train", "--mode", "supervised", "--data", str(data), "--epochs", "1",
                 "--out", str(tmp_path / "sup"), "--quiet"]) == 0
    assert (tmp_path / "sup" / "checkpoint.npz").exists()
    assert main(["evaluate", "--checkpoint", str(tmp_path / "sup" / "checkpoint.npz"),
                 "--data", str(data), "--out", str(tmp_path / "ev")]) == 0
    assert len(_csv(tmp_path / "ev" / "trace.csv")) == 120
    assert main(["train", "--mode", "supervised", "--out", str(tmp_path)]) == 2


def test_bad_dataset_is_usage_error(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("t,px\n0,0\n")
    assert main(["train", "--mode", "supervised", "--data", str(p), "--out", str(tmp_path)]) == 2


def test_simulate_trace(tmp_path, capsys):
    assert main(["simulate", "--scenario", "hover", "--baseline", "truth", "--duration", "1",
                 "--out", str(tmp_path)]) == 0
    assert "digest" in capsys.readouterr().out
    assert len(_csv(tmp_path / "trace.csv")) == 100


def test_bench_grad_table(tmp_path, capsys):
    ini = tmp_path / "b.ini"
    ini.write_text("[bench]\nhorizons = 2, 4\nreps = 1\ndense_reps = 1\n")
    assert main(["bench-grad", "--config", str(ini), "--out", str(tmp_path)]) == 0
    rows = _csv(tmp_path / "bench_grad.csv")
    assert sorted((r["method"], int(r["N"])) for r in rows) == [
        ("dense", 2), ("dense", 4), ("kf", 2), ("kf", 4)]
    assert "R^2" in capsys.readouterr().out


def test_export_plots_data(tmp_path):
    assert main(["export-plots-data", "--baseline", "zero", "--baseline", "truth",
                 "--duration", "6", "--eval-episodes", "1", "--out", str(tmp_path)]) == 0
    rows = _csv(tmp_path / "metrics_long.csv")
    assert {r["estimator"] for r in rows} == {"zero", "truth"}
    assert {"pz", "d_f", "aborted"} <= {r["metric"] for r in rows}
    assert (tmp_path / "trace_truth.csv").exists()


def test_linear_fit_r2():
    x = np.arange(5.0)
    assert linear_fit_r2(x, 2 * x + 1) == pytest.approx(1.0)
    assert linear_fit_r2(x, x ** 4) < 0.99
