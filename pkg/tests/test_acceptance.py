"""Acceptance criteria 1-9, one PASS/FAIL line each.

The slow criteria (RL training over ten seeds, the adaptive-versus-fixed
comparison) dominate the runtime; everything else takes seconds.
"""
import re
import subprocess
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
from conftest import UNIT_SESSION

from neuromhe.checks import (barrier_distances, check_finite_differences, check_horizon_one,
                             check_kf_vs_dense, check_smoothed_relation, linear_fit_r2, run_bench)
from neuromhe.dynamics import DIST_IDX
from neuromhe.estimator import MheEstimator
from neuromhe.neuro import init_weight_net
from neuromhe.sim import (disturbance_rmse, make_scenario, p_rate, run_closed_loop,
                          settling_time, simulate_flight_data, tracking_rmse)
from neuromhe.train import (DmheLearner, LossSpec, NeuroLearner, TrainConfig, evaluate_dataset,
                            run_episode_rl, train_rl, train_supervised)
from neuromhe.weights import WeightLayout

LAYOUT = WeightLayout(24, 18, 6, 100.0)
RL_SEEDS = range(10)
RL_EPISODES = 10
RL_LR = 1e-4
INIT_RAW = 0.3
EVAL_SEEDS = [10000 + i for i in range(20)]


@pytest.fixture
def report(capsys):
    def emit(n, title, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n} ({title}): {'PASS' if ok else 'FAIL'}  {detail}")
    return emit


@pytest.fixture(autouse=True)
def _quiet_overflow():
    # line-search trial points may overflow before being rejected
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


# -- 1-3: gradient correctness ----------------------------------------------

def test_c1_kf_matches_dense_oracle(report):
    t0 = time.perf_counter()
    err, failures = check_kf_vs_dense(instances=100, seed=0)
    dt = time.perf_counter() - t0
    ok = err < 1e-8 and failures == 0 and dt < 60
    report(1, "KF gradient vs dense KKT", ok,
           f"max rel err {err:.2e} over 100 instances, {failures} failures, {dt:.1f}s")
    assert ok


def test_c2_finite_differences(report):
    t0 = time.perf_counter()
    err = check_finite_differences(seed=0, n=3)
    dt = time.perf_counter() - t0
    ok = err < 1e-4 and dt < 300
    report(2, "gradient vs finite differences", ok, f"max rel err {err:.2e} (toy, N=3), {dt:.1f}s")
    assert ok


def test_c3_induction_checkpoints(report):
    e1 = check_horizon_one(seed=0)
    e2 = check_smoothed_relation(seed=0, n=2)
    ok = e1 < 1e-12 and e2 < 1e-10
    report(3, "N=1 closed form and N=2 smoothing relation", ok,
           f"N=1 err {e1:.2e} (< 1e-12), N=2 err {e2:.2e} (< 1e-10)")
    assert ok


# -- 4: runtime linearity -----------------------------------------------------

def test_c4_runtime_linear_in_horizon(report):
    hs = [10, 20, 40, 60, 80, 100]
    rows = run_bench(hs, reps=100, dense_reps=2)
    kf = [t for m, _, t in rows if m == "kf"]
    de = [t for m, _, t in rows if m == "dense"]
    r2 = linear_fit_r2(hs, kf)
    ratio_kf, ratio_de = kf[-1] / kf[0], de[-1] / de[0]
    ok = r2 >= 0.99 and ratio_kf <= 12 and ratio_de > ratio_kf
    report(4, "gradient runtime vs horizon", ok,
           f"KF R^2={r2:.4f} t100/t10={ratio_kf:.2f}; dense t100/t10={ratio_de:.1f}; "
           f"KF ms {[round(1e3 * t, 2) for t in kf]}")
    assert ok


# -- 5-6: closed-loop training ------------------------------------------------

_TRAINED = {}


def _rl_seed(seed):
    sc = make_scenario("fig8", duration=10.0, dt=0.01)
    cfg = TrainConfig(horizon=10, lr=RL_LR)
    learner = NeuroLearner(init_weight_net(LAYOUT, seed=seed, raw0=INIT_RAW), lr=RL_LR)
    base = run_episode_rl(sc, learner, cfg, seed=seed, learn=False).mean_loss
    hist = train_rl(sc, learner, RL_EPISODES, cfg, seed=seed)
    return base, hist, learner


@pytest.mark.slow
def test_c5_rl_training_halves_loss(report):
    t0 = time.perf_counter()
    good, lines = 0, []
    for seed in RL_SEEDS:
        base, hist, learner = _rl_seed(seed)
        if seed == 0:
            _TRAINED["neuro"] = learner
        best = min(hist) / base
        good += best <= 0.5
        lines.append(f"seed {seed}: untrained {base:.4g} best {best:.3f} final {hist[-1] / base:.3f}")
    dt = time.perf_counter() - t0
    ok = good >= 8 and dt < 1800
    report(5, "RL reduces L_mean by >= 50% within 10 episodes", ok,
           f"{good}/10 seeds, {dt / 60:.1f} min\n    " + "\n    ".join(lines))
    assert ok


@pytest.mark.slow
def test_c6_adaptive_beats_fixed_weights(report):
    sc = make_scenario("fig8", duration=10.0, dt=0.01)
    cfg = TrainConfig(horizon=10, lr=RL_LR)
    neuro = _TRAINED.get("neuro") or _rl_seed(0)[2]
    dmhe = DmheLearner(np.full(LAYOUT.size, INIT_RAW), lr=RL_LR)
    train_rl(sc, dmhe, RL_EPISODES, cfg, seed=0)
    z = {"neuromhe": [], "dmhe": []}
    for s in EVAL_SEEDS:
        for name, make in (("neuromhe", lambda: MheEstimator(10, net=neuro.net)),
                           ("dmhe", lambda: MheEstimator(10, weights=dmhe.weights()))):
            z[name].append(tracking_rmse(run_closed_loop(sc, make(), seed=s))["pz"])
    mn, md = np.median(z["neuromhe"]), np.median(z["dmhe"])
    pr = p_rate(z["dmhe"], z["neuromhe"])
    ok = mn < md and pr > 0
    report(6, "NeuroMHE vs DMHE z tracking", ok,
           f"median z RMSE {mn * 100:.3f} cm vs {md * 100:.3f} cm over {len(EVAL_SEEDS)} "
           f"episodes, p_rate {pr:.1f}%")
    assert ok


# -- 7: soft constraints ------------------------------------------------------

def test_c7_barrier_converges_to_active_set(report):
    d = barrier_distances((1e-2, 1e-4, 1e-6))
    ok = d[0] > d[1] > d[2] and d[2] < 1e-4
    report(7, "barrier solution vs active-set oracle", ok,
           "distances " + ", ".join(f"{v:.2e}" for v in d))
    assert ok


# -- 8: supervised pipeline ---------------------------------------------------

def _step_sine(seed, duration=4.0):
    sc = make_scenario("step-sine", duration=duration, dt=2.5e-3, event_time=duration / 2)
    return sc, simulate_flight_data(sc, seed=seed)[0]


def test_c8_supervised_training(report):
    _, train_ds = _step_sine(0)
    sc, test_ds = _step_sine(1)
    net = init_weight_net(LAYOUT, hidden=(100, 100), seed=0, raw0=INIT_RAW)

    def score(net):
        xh = evaluate_dataset(test_ds, net=net, with_control=True)
        return xh[:, DIST_IDX], test_ds.d_external

    dh0, truth = score(net)
    rmse0 = disturbance_rmse(dh0, truth)["d_f"]
    cfg = TrainConfig(horizon=10, lr=1e-3, loss=LossSpec("estimation"))
    net, losses = train_supervised(train_ds, net, 2, cfg, with_control=True)
    dh, _ = score(net)
    rmse1 = disturbance_rmse(dh, truth)["d_f"]
    ts = settling_time(test_ds.t, dh[:, 2], truth[:, 2], sc.event_time, 0.1 * sc.step_force)
    ok = rmse1 < 0.5 * rmse0 and ts < 0.5
    report(8, "supervised d_f accuracy and step settling", ok,
           f"d_f RMSE {rmse1:.3f} N vs untrained {rmse0:.3f} N (ratio {rmse1 / rmse0:.3f}); "
           f"d_fz settles within 10% of the step after {ts:.3f} s")
    assert ok


# -- 9: invariant suites ------------------------------------------------------

def test_c9_invariant_suites(report):
    if UNIT_SESSION["passed"]:
        failed = UNIT_SESSION["failed"]
        dt = UNIT_SESSION["end"] - UNIT_SESSION["start"]
        n = UNIT_SESSION["passed"]
    else:
        # acceptance file run on its own: run the unit suites in a subprocess
        here = Path(__file__).parent
        t0 = time.perf_counter()
        proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                               str(here), "--ignore", str(here / "test_acceptance.py")],
                              capture_output=True, text=True)
        dt = time.perf_counter() - t0
        summary = proc.stdout.strip().splitlines()[-1]
        failed = [] if proc.returncode == 0 else [summary]
        m = re.search(r"(\d+) passed", summary)
        n = int(m.group(1)) if m else 0
    ok = not failed and dt < 600
    report(9, "invariant suites", ok,
           f"{n} unit tests, {len(failed)} failures, {dt / 60:.1f} min")
    assert ok
