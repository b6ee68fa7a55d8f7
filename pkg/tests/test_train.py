import csv

import numpy as np
import pytest
from conftest import linear_instance, toy_instance

from neuromhe.errors import ConfigError
from neuromhe.estimator import MheEstimator
from neuromhe.gradkf import dense_kkt_gradient, coeff_matrices, kf_gradient, mhe_gradient
from neuromhe.mhe import HorizonWindow, SolverOptions, solve_mhe
from neuromhe.models import ToyModel
from neuromhe.neuro import init_mlp, map_to_weights, mlp_forward, weights_jacobian
from neuromhe.train import (AdamState, DmheLearner, LossSpec, NeuroLearner, adam_update,
                            assemble_gradient, estimation_loss, has_converged, tracking_loss,
                            write_metrics)
from neuromhe.weights import WeightLayout

TIGHT = SolverOptions(tol=1e-12, scale_tol=False, max_iter=200)


class _Sol:
    def __init__(self, xs):
        self.xs = np.asarray(xs, dtype=float)


# -- losses ----------------------------------------------------------------

def test_tracking_loss_zero_at_reference():
    rng = np.random.default_rng(0)
    xs = rng.normal(size=(4, 24))
    L, g = tracking_loss(_Sol(xs), xs[:, :6])
    assert L == 0.0 and not g.any()


def test_tracking_loss_single_slot():
    xs = np.zeros((3, 24))
    xs[1, 2] = 0.2
    L, g = tracking_loss(_Sol(xs), np.zeros((3, 6)))
    assert np.isclose(L, 0.04)
    assert np.isclose(g[1, 2], 0.4) and np.count_nonzero(g) == 1


@pytest.mark.parametrize("kind", ["tracking", "estimation"])
def test_loss_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(1)
    spec = LossSpec(kind, alpha=0.7, W_e=rng.uniform(0.5, 2.0, 6))
    xs = rng.normal(size=(5, 24))
    tgt = rng.normal(size=(5, 6))
    fn = tracking_loss if kind == "tracking" else estimation_loss
    L, g = fn(_Sol(xs), tgt, spec)
    assert L >= 0
    fd = np.zeros_like(xs)
    h = 1e-6
    for k in range(5):
        for i in range(24):
            e = np.zeros_like(xs)
            e[k, i] = h
            fd[k, i] = (fn(_Sol(xs + e), tgt, spec)[0] - fn(_Sol(xs - e), tgt, spec)[0]) / (2 * h)
    assert np.abs(g - fd).max() <= 1e-8 * max(1.0, np.abs(fd).max())
    other = np.setdiff1d(np.arange(24), spec.index)
    assert not g[:, other].any()


def test_estimation_loss_touches_disturbance_only():
    xs = np.zeros((2, 24))
    xs[:, 6] = 1.0
    L, g = estimation_loss(_Sol(xs), np.zeros((2, 6)))
    assert L == 2.0 and set(np.nonzero(g)[1]) == {6}


def test_loss_spec_validation():
    with pytest.raises(ConfigError):
        LossSpec("tracking", alpha=0.0)
    with pytest.raises(ConfigError):
        LossSpec("tracking", W_e=[1.0, -1.0, 1.0, 1, 1, 1])
    with pytest.raises(ConfigError):
        LossSpec("tracking", index=[6, 7])
    with pytest.raises(ConfigError):
        LossSpec("nonsense")
    with pytest.raises(ConfigError):
        tracking_loss(_Sol(np.zeros((3, 24))), np.zeros((2, 6)))


# -- Adam ------------------------------------------------------------------

def reference_adam(p, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g ** 2
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        p = p - lr * mh / (np.sqrt(vh) + eps)
        out.append(p)
    return out


def test_adam_matches_duplicate_transcription():
    rng = np.random.default_rng(2)
    p0 = rng.normal(size=(3, 4))
    grads = rng.normal(size=(100, 3, 4))
    ref = reference_adam(p0.copy(), grads)
    st = AdamState(lr=1e-3)
    p = {"w": p0.copy()}
    for t in range(100):
        p = adam_update(st, p, {"w": grads[t]})
        assert np.abs(p["w"] - ref[t]).max() < 1e-12


def test_adam_zero_gradient_and_steady_state():
    st = AdamState(lr=1e-2)
    p = {"a": np.ones(3)}
    p = adam_update(st, p, {"a": np.zeros(3)})
    assert np.array_equal(p["a"], np.ones(3))
    st = AdamState(lr=1e-2)
    p = {"a": np.zeros(2)}
    for _ in range(500):
        prev = p["a"].copy()
        p = adam_update(st, p, {"a": np.array([3.0, -0.01])})
    step = p["a"] - prev
    assert np.allclose(np.abs(step), 1e-2, rtol=1e-4) and step[0] < 0 < step[1]


# -- chain rule ------------------------------------------------------------

def test_zero_upstream_gives_zero_gradient():
    rng = np.random.default_rng(3)
    model, win, w8 = toy_instance(rng, n=3)
    sol = solve_mhe(win, w8, model, TIGHT)
    traj = mhe_gradient(sol, win, w8, model)
    assert not assemble_gradient(np.zeros((4, model.nx)), traj).any()
    with pytest.raises(ConfigError):
        assemble_gradient(np.zeros((3, model.nx)), traj)


def test_dmhe_gradient_matches_dense_oracle():
    rng = np.random.default_rng(4)
    model, win, w8 = linear_instance(rng, n=5)
    sol = solve_mhe(win, w8, model, TIGHT)
    c = coeff_matrices(sol, win, w8, model)
    dL = rng.normal(size=(6, model.nx))
    a = assemble_gradient(dL, kf_gradient(c, win.prior_grad))
    b = assemble_gradient(dL, dense_kkt_gradient(c, win.prior_grad))
    assert np.abs(a - b).max() <= 1e-8 * np.abs(b).max()


def _toy_pipeline(net, win, model, lay, target, spec):
    raw = mlp_forward(net, win.ys[-1])
    w8 = map_to_weights(raw, lay)
    sol = solve_mhe(win, w8, model, TIGHT)
    L, dL = estimation_loss(sol, target, spec)
    return L, dL, sol, w8, raw


def test_end_to_end_network_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    model = ToyModel()
    model, win, _ = toy_instance(rng, n=3, model=model, prior_grad=False)
    lay = WeightLayout.for_model(model)
    net = init_mlp(model.ny, lay.size, hidden=(6, 5), seed=1, bias_out=np.full(lay.size, 1.0))
    spec = LossSpec("estimation", index=np.arange(model.nx))
    target = rng.normal(size=(4, model.nx))
    L, dL, sol, w8, raw = _toy_pipeline(net, win, model, lay, target, spec)
    _, cache = mlp_forward(net, win.ys[-1], return_cache=True)
    traj = mhe_gradient(sol, win, w8, model)
    grads = assemble_gradient(dL, traj, weights_jacobian(raw, lay), net, cache)
    vec = net.flat()
    an = np.concatenate([grads[k].ravel() for k in ("A1", "b1", "A2", "b2", "Ao", "bo")])
    idx = rng.choice(len(vec), 25, replace=False)
    h = 1e-6
    for i in idx:
        e = np.zeros_like(vec)
        e[i] = h
        lp = _toy_pipeline(net.from_flat(vec + e), win, model, lay, target, spec)[0]
        lm = _toy_pipeline(net.from_flat(vec - e), win, model, lay, target, spec)[0]
        fd = (lp - lm) / (2 * h)
        assert abs(an[i] - fd) <= 1e-3 * max(abs(fd), 1e-6), i


def _replay(model, lay, raw, ys, us, targets, spec, grad):
    est = MheEstimator(4, weights=map_to_weights(raw, lay), model=model, gradients=grad,
                       options=SolverOptions(tol=1e-12, scale_tol=False, max_iter=200))
    est.reset(ys[0], 0.1)
    total, g = 0.0, np.zeros(lay.size)
    for k in range(len(ys)):
        est.update(k, ys[k], us[k - 1] if k else np.zeros(model.nu))
        n = est.solution.horizon
        L, dL = estimation_loss(est.solution, targets[k - n:k + 1], spec)
        total += L
        if grad:
            g += assemble_gradient(dL, est.grad) * weights_jacobian(raw, lay)
    return total, g


def test_sliding_window_gradient_matches_replay_finite_differences():
    # the prior gradient carried between windows makes the summed gradient exact
    rng = np.random.default_rng(6)
    model = ToyModel()
    lay = WeightLayout.for_model(model)
    x = np.array([0.2, -0.1, 0.1, 0.9])
    ys, us = [], 0.1 * rng.normal(size=(12, 1))
    for k in range(12):
        ys.append(model.measure(x) + 0.05 * rng.normal(size=model.ny))
        x = model.step(x, us[k], 0.3 * rng.normal(size=model.nw), 0.1)
    targets = rng.normal(scale=0.3, size=(12, model.nx))
    spec = LossSpec("estimation", index=np.arange(model.nx))
    raw = rng.uniform(0.5, 1.5, lay.size)
    _, g = _replay(model, lay, raw, ys, us, targets, spec, True)
    h = 1e-6
    for i in range(0, lay.size, 2):
        e = np.zeros(lay.size)
        e[i] = h
        fd = (_replay(model, lay, raw + e, ys, us, targets, spec, False)[0]
              - _replay(model, lay, raw - e, ys, us, targets, spec, False)[0]) / (2 * h)
        assert abs(g[i] - fd) <= 1e-5 * max(np.abs(g).max(), 1e-8), i


def test_learners_update_parameters():
    rng = np.random.default_rng(7)
    model = ToyModel()
    lay = WeightLayout.for_model(model)
    dm = DmheLearner(np.ones(lay.size), lr=1e-2)
    est = dm.make_estimator(3, model)
    est.gradients = True
    est.reset(np.zeros(model.ny), 0.1)
    for k in range(4):
        est.update(k, rng.normal(size=model.ny), np.zeros(1))
    before = dm.raw.copy()
    dm.update(est, rng.normal(size=(4, model.nx)))
    assert not np.array_equal(before, dm.raw)
    assert np.array_equal(est.fixed.to_theta(), dm.weights().to_theta())
    nl = NeuroLearner(init_mlp(model.ny, lay.size, hidden=(4, 4), seed=0), lr=1e-2)
    est = nl.make_estimator(3, model)
    est.gradients = True
    est.reset(np.zeros(model.ny), 0.1)
    for k in range(4):
        est.update(k, rng.normal(size=model.ny), np.zeros(1))
    old = nl.net.flat()
    nl.update(est, rng.normal(size=(4, model.nx)))
    assert not np.array_equal(old, nl.net.flat()) and est.net is nl.net


# -- bookkeeping -----------------------------------------------------------

def test_convergence_rule():
    assert not has_converged([1.0, 0.5])
    assert has_converged([1.0, 0.5, 0.5, 0.5, 0.5], rel=1e-3, episodes=3)
    assert not has_converged([1.0, 0.5, 0.5, 0.4, 0.4], rel=1e-3, episodes=3)


def test_metrics_csv(tmp_path):
    p = tmp_path / "m.csv"
    write_metrics(p, [(0, 10, 0.5, 1e-9, 0, 10, 0)], "abc123")
    lines = p.read_text().splitlines()
    assert lines[0] == "# config-hash: abc123"
    rows = list(csv.reader(lines[1:]))
    assert rows[0][0] == "episode" and rows[1][2] == "0.5"


def test_window_requires_consistent_horizon():
    with pytest.raises(ConfigError):
        HorizonWindow(np.zeros((3, 2)), np.zeros((1, 1)), 0.1, np.zeros(4))
