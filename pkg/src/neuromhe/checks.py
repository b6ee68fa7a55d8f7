"""Gradient self-checks and the runtime benchmark behind ``gradcheck``/``bench-grad``."""
import itertools
import time

import numpy as np

from .dynamics import MEAS_IDX, QuadrotorModel, euler_zyx_to_rot, integrate_rk4, make_state, measure
from .errors import GradientFailure
from .gradkf import coeff_matrices, dense_kkt_gradient, kf_gradient
from .mhe import HorizonWindow, LinearConstraint, SoftConstraintSet, SolverOptions, solve_mhe
from .models import ScalarModel, ToyModel
from .sim import TruthEstimator, make_scenario, run_closed_loop
from .weights import WeightLayout, WeightSpec

TIGHT = SolverOptions(tol=1e-12, scale_tol=False, max_iter=200)


def random_theta(rng, layout, lo=0.5, hi=5.0):
    theta = rng.uniform(lo, hi, layout.size)
    theta[list(layout.gamma_indices)] = rng.uniform(0.6, 0.95, 2)
    return WeightSpec.from_theta(theta, layout)


def random_window(rng, kind="toy", n=3, prior_grad=True):
    """Random solved-problem ingredients ``(model, window, weights)``.

    ``kind`` is ``toy`` (four-state oscillator) or ``quad`` (quadrotor).
    """
    if kind == "quad":
        model = QuadrotorModel()
        x = make_state(p=rng.normal(size=3), v=rng.normal(size=3), d_f=rng.normal(size=3),
                       R=euler_zyx_to_rot(*rng.uniform(-0.3, 0.3, 3)),
                       omega=rng.normal(scale=0.5, size=3), d_tau=0.01 * rng.normal(size=3))
        dt, us = 0.01, np.tile([7.4, 0.0, 0.0, 0.0], (n, 1)) + 0.01 * rng.normal(size=(n, 4))
        xs = [x]
        for k in range(n):
            xs.append(integrate_rk4(xs[-1], us[k], 0.5 * rng.normal(size=6), dt))
        ys = np.array([measure(v) for v in xs]) + 0.01 * rng.normal(size=(n + 1, 18))
        x_prior = xs[0] + 0.01 * rng.normal(size=24)
    else:
        model = ToyModel()
        dt, us = 0.1, 0.1 * rng.normal(size=(n, 1))
        xs = [rng.normal(scale=0.5, size=4)]
        for k in range(n):
            xs.append(model.step(xs[-1], us[k], 0.3 * rng.normal(size=2), dt))
        ys = np.array([model.measure(v) for v in xs]) + 0.05 * rng.normal(size=(n + 1, 2))
        x_prior = xs[0] + 0.05 * rng.normal(size=4)
    lay = WeightLayout.for_model(model)
    pg = 0.1 * rng.normal(size=(model.nx, lay.size)) if prior_grad else None
    return model, HorizonWindow(ys, us, dt, x_prior, pg), random_theta(rng, lay)


def _corrupt(c):
    c.Lxth[0] = c.Lxth[0] * 1.01 + 1e-3
    return c


def check_kf_vs_dense(instances=100, seed=0, corrupt=False):
    """Largest relative error between the recursive and dense gradients.

    Alternates toy and quadrotor windows with horizons 1..10.  Returns
    ``(max_rel_err, n_failures)``.
    """
    rng = np.random.default_rng(seed)
    worst, failures = 0.0, 0
    for i in range(instances):
        model, win, w8 = random_window(rng, "quad" if i % 2 else "toy", 1 + i % 10)
        opts = SolverOptions(raise_on_failure=False, max_iter=100) if i % 2 else TIGHT
        sol = solve_mhe(win, w8, model, opts)
        c = coeff_matrices(sol, win, w8, model)
        try:
            dense = dense_kkt_gradient(c, win.prior_grad)
            kf = kf_gradient(_corrupt(c) if corrupt else c, win.prior_grad)
        except GradientFailure:
            failures += 1
            continue
        worst = max(worst, np.abs(kf.Xs - dense.Xs).max() / max(np.abs(dense.Xs).max(), 1e-300))
    return worst, failures


def check_horizon_one(seed=0, corrupt=False):
    """Error of the first filtered sensitivity against its closed form for ``N = 1``."""
    rng = np.random.default_rng(seed + 1)
    model, win, w8 = random_window(rng, "toy", 1)
    sol = solve_mhe(win, w8, model, TIGHT)
    c = coeff_matrices(sol, win, w8, model)
    P = np.diag(w8.P_diag)
    S0 = -c.Lxx[0] + c.Lxw[0] @ np.linalg.solve(c.Lww[0], c.Lxw[0].T)
    T0 = -c.Lxth[0] + c.Lxw[0] @ np.linalg.solve(c.Lww[0], c.Lwth[0])
    closed = np.linalg.solve(P - S0, T0 + P @ win.prior_grad)
    if corrupt:
        _corrupt(c)
    _, states = kf_gradient(c, win.prior_grad, return_states=True)
    return float(np.abs(states[0].X_kf - closed).max() / max(np.abs(closed).max(), 1.0))


def check_finite_differences(seed=0, n=3, step=1e-5, corrupt=False):
    """Relative error of the analytic window sensitivity against central differences."""
    rng = np.random.default_rng(seed + 2)
    model, win, w8 = random_window(rng, "toy", n, prior_grad=False)
    sol = solve_mhe(win, w8, model, TIGHT)
    c = coeff_matrices(sol, win, w8, model)
    traj = kf_gradient(_corrupt(c) if corrupt else c)
    theta = w8.to_theta()
    fd = np.empty_like(traj.Xs)
    for j in range(len(theta)):
        h = step * max(1.0, abs(theta[j]))
        xs = []
        for s in (1, -1):
            t = theta.copy()
            t[j] += s * h
            xs.append(solve_mhe(win, WeightSpec.from_theta(t, w8.layout), model, TIGHT,
                                init=(sol.xs[0], sol.ws)).xs)
        fd[:, :, j] = (xs[0] - xs[1]) / (2 * h)
    return float(np.abs(traj.Xs - fd).max() / max(np.abs(fd).max(), 1e-12))


def check_smoothed_relation(seed=0, n=2):
    """Error of ``X_0 = X_kf0 + C_0 Fbar_0^T Lam_0`` with every piece computed
    independently (dense solve for ``Lam``, explicit Riccati start)."""
    rng = np.random.default_rng(seed + 3)
    model, win, w8 = random_window(rng, "toy", n)
    sol = solve_mhe(win, w8, model, TIGHT)
    c = coeff_matrices(sol, win, w8, model)
    de = dense_kkt_gradient(c, win.prior_grad)
    kf = kf_gradient(c, win.prior_grad)
    P = np.diag(w8.P_diag)
    LiWx = np.linalg.solve(c.Lww[0], c.Lxw[0].T)
    S0 = -c.Lxx[0] + c.Lxw[0] @ LiWx
    T0 = -c.Lxth[0] + c.Lxw[0] @ np.linalg.solve(c.Lww[0], c.Lwth[0])
    C0 = np.linalg.inv(P - S0)
    rhs = C0 @ (T0 + P @ win.prior_grad) + C0 @ (c.F[0] - c.G[0] @ LiWx).T @ de.Lams[0]
    return float(np.abs(kf.Xs[0] - rhs).max() / max(1.0, np.abs(rhs).max()))


def run_gradcheck(instances=100, seed=0, corrupt=False, fd_step=1e-5, out=print):
    """Run the three checks, print one PASS/FAIL line each and return overall success."""
    err, fails = check_kf_vs_dense(instances, seed, corrupt)
    ok1 = err < 1e-8 and fails == 0
    out(f"KF vs dense: max rel err {err:.3e} < 1e-8: {'PASS' if ok1 else 'FAIL'}"
        f" ({instances} instances, {fails} gradient failures)")
    e2 = check_horizon_one(seed, corrupt)
    ok2 = e2 < 1e-12
    out(f"N=1 closed form: max rel err {e2:.3e} < 1e-12: {'PASS' if ok2 else 'FAIL'}")
    e3 = check_finite_differences(seed, step=fd_step, corrupt=corrupt)
    ok3 = e3 < 1e-4
    out(f"finite differences (N=3): max rel err {e3:.3e} < 1e-4: {'PASS' if ok3 else 'FAIL'}")
    return ok1 and ok2 and ok3


# --------------------------------------------------------------------------
# soft constraints

def scalar_problem(n=3, c=0.1):
    """Scalar random-walk window with the noise bound ``w_k <= c``."""
    model = ScalarModel()
    lay = WeightLayout.for_model(model)
    ys = np.array([[0.0], [0.5], [1.0], [1.2], [1.3]])[: n + 1]
    win = HorizonWindow(ys, np.zeros((n, 1)), 1.0, np.zeros(1))
    w8 = WeightSpec(np.array([1.0]), 0.9, np.array([4.0]), 0.9, np.array([1.0]), lay)
    cons = [LinearConstraint([0.0], [1.0], -c)]
    return model, win, w8, cons


def active_set_oracle(model, win, w8, c):
    """Exact QP solution of the scalar problem with ``w_k <= c``.

    Decision vector ``[x_0, w_0..w_{n-1}]`` with ``x_k = x_0 + sum_{j<k} w_j``;
    every active set is enumerated and the KKT-consistent one kept.
    """
    n = win.horizon
    nz = 1 + n
    Hm = np.zeros((nz, nz))
    g = np.zeros(nz)
    Hm[0, 0] += w8.P_diag[0]
    g[0] -= w8.P_diag[0] * win.prior_x[0]
    for k in range(n + 1):
        r = w8.R_at(k, n)[0]
        row = np.zeros(nz)
        row[0] = 1.0
        row[1:k + 1] = 1.0
        Hm += r * np.outer(row, row)
        g -= r * row * win.ys[k, 0]
    for k in range(n):
        Hm[1 + k, 1 + k] += w8.Q_at(k, n)[0]
    best = None
    for act in itertools.product([0, 1], repeat=n):
        idx = [1 + k for k in range(n) if act[k]]
        m = len(idx)
        K = np.zeros((nz + m, nz + m))
        K[:nz, :nz] = Hm
        rhs = np.concatenate([-g, np.full(m, c)])
        for j, i in enumerate(idx):
            K[i, nz + j] = K[nz + j, i] = 1.0
        sol = np.linalg.solve(K, rhs)
        z, mu = sol[:nz], sol[nz:]
        if np.all(z[1:] <= c + 1e-12) and np.all(mu >= -1e-12):
            best = z
    return best



def barrier_distances(deltas=(1e-2, 1e-4, 1e-6), c=0.1):
    """Max-norm distance of the barrier solution to the active-set optimum, per ``delta``."""
    model, win, w8, cons = scalar_problem(c=c)
    z = active_set_oracle(model, win, w8, c)
    out = []
    for delta in deltas:
        sol = solve_mhe(win, w8, model, SolverOptions(tol=1e-10, scale_tol=False),
                        barrier=SoftConstraintSet(cons, delta))
        out.append(float(np.abs(np.concatenate([sol.xs[0], sol.ws[:, 0]]) - z).max()))
    return out


# --------------------------------------------------------------------------
# runtime benchmark

def bench_problem(n, seed=0):
    """Coefficient blocks of a converged quadrotor window of horizon ``n``.

    The window is cut from the end of a short hover flight with a step and
    sinusoidal disturbance.
    """
    rng = np.random.default_rng(seed)
    sc = make_scenario("step-sine", duration=max(1.0, (n + 1) * 0.01 + 0.5))
    tr = run_closed_loop(sc, TruthEstimator(), seed=seed)
    model = QuadrotorModel()
    ys = tr.x_true[-(n + 1):, MEAS_IDX] + 1e-3 * rng.standard_normal((n + 1, 18))
    lay = WeightLayout.for_model(model)
    w8 = WeightSpec.uniform(lay, p=1.0, r=100.0, q=0.1)
    win = HorizonWindow(ys, tr.u[-(n + 1):-1], sc.dt, tr.x_true[-(n + 1)],
                        np.zeros((model.nx, lay.size)))
    sol = solve_mhe(win, w8, model, SolverOptions(raise_on_failure=False, max_iter=100))
    return coeff_matrices(sol, win, w8, model), win.prior_grad


def run_bench(horizons, reps=100, dense_reps=3, seed=0):
    """Best-of-``reps`` wall time per gradient solve; rows ``(method, N, seconds)``.

    Each repetition cycles through every horizon, so a slow spell on the
    host hits all of them alike.  The minimum is used because scheduler
    noise only ever adds time.
    """
    horizons = [int(n) for n in horizons]
    probs = [bench_problem(n, seed) for n in horizons]
    rows = []
    for method, fn, r in (("kf", kf_gradient, reps), ("dense", dense_kkt_gradient, dense_reps)):
        best = [np.inf] * len(horizons)
        for _ in range(max(1, int(r))):
            for i, (c, pg) in enumerate(probs):
                t0 = time.perf_counter()
                fn(c, pg)
                best[i] = min(best[i], time.perf_counter() - t0)
        rows += [(method, n, t) for n, t in zip(horizons, best)]
    return rows


def linear_fit_r2(x, y):
    """Coefficient of determination of a straight-line least-squares fit."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    ss = np.sum((y - y.mean()) ** 2)
    return float(1.0 - np.sum((y - A @ coef) ** 2) / ss) if ss > 0 else 1.0
