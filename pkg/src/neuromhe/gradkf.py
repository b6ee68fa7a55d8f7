"""Analytic gradient of the MHE estimate with respect to the weights.

The sensitivities ``X_k = dx_k/dtheta`` are the optimal trajectory of an
auxiliary linear-quadratic estimation problem whose matrices are the second
derivatives of the MHE Lagrangian at the solution.  That problem is solved
recursively by a Kalman filter (forward) followed by a backward multiplier
pass and a forward smoothing pass, so the cost is linear in the horizon.
A dense solve of the differential KKT system is provided as an oracle.

Lagrangian convention::

    L = J + sum_k lam_k^T (x_{k+1} - f(x_k, u_k, w_k))
"""
from dataclasses import dataclass

import numpy as np

from .errors import GradientFailure
from .mhe import barrier_hessians

SINGULAR_TOL = 1e-10


@dataclass
class CoeffMatrices:
    """Second-order coefficient blocks along a horizon of length ``n``.

    ``Lxx[k]`` excludes the arrival weight ``P`` (it is added explicitly at
    ``k = 0``).  Shapes: ``Lxx (n+1, nx, nx)``, ``Lxw (n, nx, nw)``,
    ``Lww (n, nw, nw)``, ``Lxth (n+1, nx, p)``, ``Lwth (n, nw, p)``,
    ``F (n, nx, nx)``, ``G (n, nx, nw)``.
    """

    Lxx: np.ndarray
    Lxw: np.ndarray
    Lww: np.ndarray
    Lxth: np.ndarray
    Lwth: np.ndarray
    F: np.ndarray
    G: np.ndarray
    H: np.ndarray
    P_diag: np.ndarray

    @property
    def horizon(self):
        return self.Lxx.shape[0] - 1

    @property
    def Lwx(self):
        return np.transpose(self.Lxw, (0, 2, 1))

    @property
    def n_theta(self):
        return self.Lxth.shape[2]


@dataclass
class GradientTrajectory:
    Xs: np.ndarray      # (n+1, nx, p)
    Ws: np.ndarray      # (n, nw, p)
    Lams: np.ndarray    # (n, nx, p); Lam_n = 0 is implicit


@dataclass
class KfRecursionState:
    X_kf: np.ndarray
    C: np.ndarray
    P_cov: np.ndarray
    S: np.ndarray
    T: np.ndarray
    Fbar: np.ndarray | None


def coeff_matrices(solution, window, weights, model, barrier=None):
    """Lagrangian second derivatives at a converged MHE solution."""
    n = window.horizon
    nx, nw = model.nx, model.nw
    lay = weights.layout
    p = lay.size
    H = model.H
    xs, ws, lam = solution.xs, solution.ws, solution.duals
    g1, g2 = weights.gamma1, weights.gamma2
    Rd, Qd = weights.R_diag, weights.Q_diag
    HtRH = H.T @ (Rd[:, None] * H)

    Lxx = np.empty((n + 1, nx, nx))
    Lxw = np.zeros((n, nx, nw))
    Lww = np.empty((n, nw, nw))
    Lxth = np.zeros((n + 1, nx, p))
    Lwth = np.zeros((n, nw, p))
    F = np.empty((n, nx, nx))
    G = np.empty((n, nx, nw))
    rcols = np.arange(lay.n_fixed, lay.ny)
    for k in range(n + 1):
        e = window.ys[k] - model.measure(xs[k])
        ek = n - k
        Lxx[k] = g1 ** ek * HtRH
        Lxth[k][:, lay.r_slice] = -(g1 ** ek) * H[rcols].T * e[rcols]
        if ek:
            Lxth[k][:, lay.gamma1_index] = -ek * g1 ** (ek - 1) * (H.T @ (Rd * e))
        if k < n:
            Fk, Gk = model.jac(xs[k], window.us[k], ws[k], window.dt)
            F[k], G[k] = Fk, Gk
            hxx, hxw, hww = model.hess(xs[k], window.us[k], ws[k], lam[k], window.dt)
            Lxx[k] -= hxx
            Lxw[k] = -hxw
            eq = n - 1 - k
            Lww[k] = np.diag(g2 ** eq * Qd) - hww
            Lwth[k][:, lay.q_slice] = np.diag(g2 ** eq * ws[k])
            if eq:
                Lwth[k][:, lay.gamma2_index] = eq * g2 ** (eq - 1) * Qd * ws[k]
    Lxth[0][:, lay.p_slice] += np.diag(xs[0] - window.prior_x)
    if barrier is not None:
        from .mhe import build_cost
        bxx, bxw, bww = barrier_hessians(build_cost(window, weights, model, barrier), xs, ws)
        Lxx += bxx
        Lxw += bxw
        Lww += bww
    for k in range(n):
        off = Lww[k] - np.diag(np.diag(Lww[k]))
        if not off.any():
            d = np.abs(np.diag(Lww[k]))
            if np.all(np.isfinite(d)) and d.min() > SINGULAR_TOL * max(1.0, d.max()):
                continue
        s = np.linalg.svd(Lww[k], compute_uv=False)
        if not np.all(np.isfinite(s)) or s[-1] <= SINGULAR_TOL * max(1.0, s[0]):
            raise GradientFailure(f"L_ww is singular at horizon index {k}", k)
    return CoeffMatrices(Lxx, Lxw, Lww, Lxth, Lwth, F, G, H, weights.P_diag.copy())


def _solve(A, B, k, what):
    try:
        out = np.linalg.solve(A, B)
    except np.linalg.LinAlgError as exc:
        raise GradientFailure(f"{what} is singular at horizon index {k}", k) from exc
    if not np.all(np.isfinite(out)):
        raise GradientFailure(f"non-finite result while inverting {what} at index {k}", k)
    return out


def _gain(P, S, k):
    nx = len(P)
    A = np.eye(nx) - P @ S
    smin = np.linalg.svd(A, compute_uv=False)[-1]
    if not smin >= SINGULAR_TOL:
        raise GradientFailure(f"I - P S is singular at horizon index {k} (sigma_min={smin:.2e})", k)
    return _solve(A, P, k, "I - P S")


def kf_gradient(coeffs, prior_grad=None, return_states=False):
    """Sensitivities of the MHE solution by the recursive Kalman-filter method.

    ``prior_grad`` is ``d x_prior / d theta`` (``None`` for zero).  With
    ``return_states`` the per-step filter quantities are returned as well.
    """
    c = coeffs
    n = c.horizon
    nx, p = c.Lxx.shape[1], c.n_theta
    Xp = np.zeros((nx, p)) if prior_grad is None else np.asarray(prior_grad, dtype=float)

    S = np.empty((n + 1, nx, nx))
    T = np.empty((n + 1, nx, p))
    Fbar = np.empty((n, nx, nx))
    GLG = np.empty((n, nx, nx))
    GLth = np.empty((n, nx, p))
    LiWx = np.empty((n, c.Lww.shape[1], nx))
    LiWth = np.empty((n, c.Lww.shape[1], p))
    for k in range(n):
        Lwx = c.Lxw[k].T
        sol = _solve(c.Lww[k], np.hstack([Lwx, c.Lwth[k], c.G[k].T]), k, "L_ww")
        LiWx[k], LiWth[k] = sol[:, :nx], sol[:, nx:nx + p]
        LiGt = sol[:, nx + p:]
        S[k] = c.Lxw[k] @ LiWx[k] - c.Lxx[k]
        T[k] = c.Lxw[k] @ LiWth[k] - c.Lxth[k]
        Fbar[k] = c.F[k] - c.G[k] @ LiWx[k]
        GLG[k] = c.G[k] @ LiGt
        GLth[k] = c.G[k] @ LiWth[k]
    S[n] = -c.Lxx[n]
    T[n] = -c.Lxth[n]

    Xkf = np.empty((n + 1, nx, p))
    C = np.empty((n + 1, nx, nx))
    Pk = np.diag(1.0 / c.P_diag)
    Xbar = Pk @ T[0] + Xp
    C[0] = _gain(Pk, S[0], 0)
    Xkf[0] = Xbar + C[0] @ (S[0] @ Xbar)
    states = [KfRecursionState(Xkf[0], C[0], Pk, S[0], T[0], Fbar[0] if n else None)] \
        if return_states else None
    for k in range(1, n + 1):
        Xpred = Fbar[k - 1] @ Xkf[k - 1] - GLth[k - 1]
        Pk = Fbar[k - 1] @ C[k - 1] @ Fbar[k - 1].T + GLG[k - 1]
        Pk = 0.5 * (Pk + Pk.T)
        C[k] = _gain(Pk, S[k], k)
        Xkf[k] = Xpred + C[k] @ (S[k] @ Xpred + T[k])
        if return_states:
            states.append(KfRecursionState(Xkf[k], C[k], Pk, S[k], T[k],
                                           Fbar[k] if k < n else None))

    Lams = np.empty((n, nx, p))
    nxt = None
    for k in range(n, 0, -1):
        v = S[k] @ Xkf[k] + T[k]
        if nxt is not None:
            FtL = Fbar[k].T @ nxt
            v += FtL + S[k] @ (C[k] @ FtL)
        Lams[k - 1] = v
        nxt = v
    Xs = np.empty_like(Xkf)
    Xs[n] = Xkf[n]
    for k in range(n):
        Xs[k] = Xkf[k] + C[k] @ (Fbar[k].T @ Lams[k])
    Ws = np.empty((n, c.Lww.shape[1], p))
    for k in range(n):
        Ws[k] = _solve(c.Lww[k], c.G[k].T @ Lams[k] - c.Lxw[k].T @ Xs[k] - c.Lwth[k], k, "L_ww")
    traj = GradientTrajectory(Xs, Ws, Lams)
    if return_states:
        return traj, states
    return traj


def dense_kkt_matrix(coeffs, prior_grad=None):
    """Assemble the differential KKT system ``K z = b``.

    Unknown layout (row blocks of ``z``, each with ``p`` columns)::

        [X_0, ..., X_n,  W_0, ..., W_{n-1},  Lam_0, ..., Lam_{n-1}]

    Equation rows follow the same order: stationarity in ``x_0..x_n``, in
    ``w_0..w_{n-1}``, then the linearized dynamics ``X_{k+1} = F X_k + G W_k``.
    """
    c = coeffs
    n = c.horizon
    nx, nw, p = c.Lxx.shape[1], c.Lww.shape[1] if n else 0, c.n_theta
    Xp = np.zeros((nx, p)) if prior_grad is None else np.asarray(prior_grad, dtype=float)
    ox, ow, ol = 0, (n + 1) * nx, (n + 1) * nx + n * nw
    size = ol + n * nx
    K = np.zeros((size, size))
    b = np.zeros((size, p))

    def xs(k):
        return slice(ox + k * nx, ox + (k + 1) * nx)

    def wsl(k):
        return slice(ow + k * nw, ow + (k + 1) * nw)

    def ls(k):
        return slice(ol + k * nx, ol + (k + 1) * nx)

    for k in range(n + 1):
        r = xs(k)
        K[r, xs(k)] = c.Lxx[k]
        b[r] = -c.Lxth[k]
        if k < n:
            K[r, wsl(k)] = c.Lxw[k]
            K[r, ls(k)] = -c.F[k].T
        if k > 0:
            K[r, ls(k - 1)] += np.eye(nx)
    K[xs(0), xs(0)] += np.diag(c.P_diag)
    b[xs(0)] += c.P_diag[:, None] * Xp
    for k in range(n):
        r = wsl(k)
        K[r, xs(k)] = c.Lxw[k].T
        K[r, wsl(k)] = c.Lww[k]
        K[r, ls(k)] = -c.G[k].T
        b[r] = -c.Lwth[k]
        r = ls(k)
        K[r, xs(k + 1)] = np.eye(nx)
        K[r, xs(k)] = -c.F[k]
        K[r, wsl(k)] = -c.G[k]
    return K, b


def dense_kkt_gradient(coeffs, prior_grad=None):
    """Reference solution of the differential KKT system by a dense solve."""
    c = coeffs
    n = c.horizon
    nx, p = c.Lxx.shape[1], c.n_theta
    nw = c.Lww.shape[1] if n else 0
    K, b = dense_kkt_matrix(coeffs, prior_grad)
    try:
        z = np.linalg.solve(K, b)
    except np.linalg.LinAlgError as exc:
        raise GradientFailure("dense KKT matrix is singular") from exc
    ow, ol = (n + 1) * nx, (n + 1) * nx + n * nw
    Xs = z[:ow].reshape(n + 1, nx, p)
    Ws = z[ow:ol].reshape(n, nw, p)
    Lams = z[ol:].reshape(n, nx, p)
    return GradientTrajectory(Xs, Ws, Lams)


def auxiliary_cost_value(traj, coeffs, prior_grad=None):
    """Trace-form quadratic cost whose constrained minimizer is ``traj``.

    ::

        J2 = 1/2 tr((X_0 - Xp)^T P (X_0 - Xp))
             + sum_k 1/2 tr([X_k; W_k]^T L_k [X_k; W_k]) + tr(X_k^T Lxth_k) + tr(W_k^T Lwth_k)

    with ``L_k`` the ``(x, w)`` Hessian block (``W_n`` absent).
    """
    c = coeffs
    n = c.horizon
    Xp = np.zeros_like(traj.Xs[0]) if prior_grad is None else np.asarray(prior_grad, dtype=float)
    d = traj.Xs[0] - Xp
    J = 0.5 * np.sum(d * (c.P_diag[:, None] * d))
    for k in range(n + 1):
        X = traj.Xs[k]
        J += 0.5 * np.sum(X * (c.Lxx[k] @ X)) + np.sum(X * c.Lxth[k])
        if k < n:
            W = traj.Ws[k]
            J += np.sum(X * (c.Lxw[k] @ W)) + 0.5 * np.sum(W * (c.Lww[k] @ W)) \
                + np.sum(W * c.Lwth[k])
    return float(J)


def mhe_gradient(solution, window, weights, model, barrier=None, method="kf"):
    """Convenience wrapper: coefficient matrices plus the chosen solver."""
    coeffs = coeff_matrices(solution, window, weights, model, barrier)
    if method == "kf":
        return kf_gradient(coeffs, window.prior_grad)
    if method == "dense":
        return dense_kkt_gradient(coeffs, window.prior_grad)
    raise ValueError(f"unknown gradient method {method!r}")
