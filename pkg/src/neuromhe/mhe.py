"""Nonlinear moving horizon estimation.

The window holds ``n + 1`` measurements ``y_0..y_n`` (``n`` is the newest,
i.e. the current time ``t``) and ``n`` inputs ``u_0..u_{n-1}``.  The problem

    min  1/2 |x_0 - x_prior|_P^2 + 1/2 sum_k |y_k - H x_k|_{R_k}^2
         + 1/2 sum_k |w_k|_{Q_k}^2 [- delta sum_{k,i} ln(-g_{k,i}(x_k, w_k))]
    s.t. x_{k+1} = f(x_k, u_k, w_k, dt)

is solved by single shooting in ``z = (x_0, w_0..w_{n-1})`` with a
Levenberg-Marquardt damped Gauss-Newton iteration and Armijo backtracking.
Duals are recovered afterwards by the backward recursion

    lam_{n-1} = H^T R_n e_n,  lam_{k-1} = H^T R_k e_k + F_k^T lam_k,

which makes the stationarity condition in ``x_1..x_n`` hold by
construction; the remaining conditions (w.r.t. ``x_0`` and ``w``) are
exactly the reduced gradient and are reported as ``kkt_residual``.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, NonConvergenceError, NumericalError
from .weights import WeightSpec


@dataclass
class HorizonWindow:
    ys: np.ndarray          # (n+1, ny)
    us: np.ndarray          # (n, nu)
    dt: float
    prior_x: np.ndarray     # (nx,)
    prior_grad: np.ndarray | None = None  # (nx, n_theta), None means zero

    def __post_init__(self):
        self.ys = np.atleast_2d(np.asarray(self.ys, dtype=float))
        n = len(self.ys) - 1
        us = np.asarray(self.us, dtype=float)
        if us.ndim == 2 and us.shape[0] == n:
            self.us = us
        elif us.ndim == 1 and n > 0 and us.size % n == 0:
            self.us = us.reshape(n, -1)
        elif us.size == 0 and n == 0:
            self.us = us.reshape(0, us.shape[-1] if us.ndim == 2 else 1)
        else:
            raise ConfigError(f"window has {n} intervals but controls of shape {us.shape}")
        self.prior_x = np.asarray(self.prior_x, dtype=float)
        if not self.dt > 0:
            raise ConfigError("dt must be positive")

    @property
    def horizon(self):
        return len(self.ys) - 1


@dataclass
class MheSolution:
    xs: np.ndarray          # (n+1, nx)
    ws: np.ndarray          # (n, nw)
    duals: np.ndarray       # (n, nx); lam_n = 0 is implicit
    cost: float
    kkt_residual: float
    iterations: int = 0
    converged: bool = True

    @property
    def horizon(self):
        return len(self.xs) - 1


@dataclass
class SolverOptions:
    tol: float = 1e-8
    max_iter: int = 50
    mu0: float = 1e-8
    mu_min: float = 1e-14
    mu_max: float = 1e12
    armijo: float = 1e-4
    max_backtrack: int = 30
    scale_tol: bool = True
    raise_on_failure: bool = True
    hessian: str = "auto"   # "gauss-newton", "exact" or "auto"

    def __post_init__(self):
        if self.hessian not in ("gauss-newton", "exact", "auto"):
            raise ConfigError(f"unknown hessian mode {self.hessian!r}")
        if self.tol <= 0 or self.max_iter < 1:
            raise ConfigError("solver tolerance and max_iter must be positive")


class LinearConstraint:
    """Scalar constraint ``a . x + b . w + c <= 0``."""

    def __init__(self, a, b, c):
        self.a = np.asarray(a, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.c = float(c)

    def __call__(self, x, w):
        return float(self.a @ x + self.b @ w + self.c), self.a, self.b


@dataclass
class SoftConstraintSet:
    """Constraints ``g(x_k, w_k) <= 0`` applied at every horizon index.

    Each constraint is a callable returning ``(g, dg/dx, dg/dw)`` and
    optionally a fourth item ``(g_xx, g_xw, g_ww)`` with its curvature
    (omitted means affine).  At the newest index there is no ``w`` and zeros
    are passed.  ``delta`` is the
    log-barrier weight.
    """

    constraints: list
    delta: float = 1e-4

    def __post_init__(self):
        if not self.delta > 0:
            raise ConfigError("barrier parameter must be positive")


@dataclass
class MheCost:
    """Cost descriptor produced by :func:`build_cost`."""

    model: object
    window: HorizonWindow
    weights: WeightSpec
    barrier: SoftConstraintSet | None = None
    _R: list = field(init=False, repr=False)
    _Q: list = field(init=False, repr=False)

    def __post_init__(self):
        n = self.window.horizon
        self._R = [self.weights.R_at(k, n) for k in range(n + 1)]
        self._Q = [self.weights.Q_at(k, n) for k in range(n)]

    @property
    def R(self):
        return self._R

    @property
    def Q(self):
        return self._Q

    def rollout(self, x0, ws):
        win, model = self.window, self.model
        xs = np.empty((win.horizon + 1, len(x0)))
        xs[0] = x0
        for k in range(win.horizon):
            xs[k + 1] = model.step(xs[k], win.us[k], ws[k], win.dt)
        return xs

    def barrier_terms(self, xs, ws):
        """Barrier value and per-index first/second derivative pieces.

        Returns ``None`` for the value when any constraint is not strictly
        satisfied.
        """
        b = self.barrier
        n = len(xs) - 1
        nw = self.model.nw
        val = 0.0
        gx = np.zeros_like(xs)
        gw = np.zeros((n, nw))
        terms = []
        for k in range(n + 1):
            wk = ws[k] if k < n else np.zeros(nw)
            for con in b.constraints:
                out = con(xs[k], wk)
                g, ax, aw = out[0], np.asarray(out[1], float), np.asarray(out[2], float)
                curv = out[3] if len(out) > 3 else None
                if not g < 0:
                    return None, None, None, None
                val -= b.delta * np.log(-g)
                gx[k] += b.delta * ax / (-g)
                if k < n:
                    gw[k] += b.delta * aw / (-g)
                terms.append((k, g, ax, aw if k < n else np.zeros(nw), curv))
        return val, gx, gw, terms

    def value(self, xs, ws):
        """Cost of a trajectory; ``inf`` outside the barrier's interior."""
        win, w8 = self.window, self.weights
        dx = xs[0] - win.prior_x
        J = 0.5 * dx @ (w8.P_diag * dx)
        for k in range(win.horizon + 1):
            e = win.ys[k] - self.model.measure(xs[k])
            J += 0.5 * e @ (self._R[k] * e)
        for k in range(win.horizon):
            J += 0.5 * ws[k] @ (self._Q[k] * ws[k])
        if self.barrier is not None:
            bval = self.barrier_terms(xs, ws)[0]
            if bval is None:
                return np.inf
            J += bval
        return float(J)


def build_cost(window, weights, model, barrier=None):
    if not isinstance(weights, WeightSpec):
        raise ConfigError("weights must be a WeightSpec")
    weights.validate()
    lay = weights.layout
    if (lay.nx, lay.ny, lay.nw) != (model.nx, model.ny, model.nw):
        raise ConfigError("weight layout does not match the model dimensions")
    if window.ys.shape[1] != model.ny or window.prior_x.shape != (model.nx,):
        raise ConfigError("window dimensions do not match the model")
    return MheCost(model, window, weights, barrier)


def barrier_hessians(cost, xs, ws):
    """Second derivatives of the barrier term per horizon index.

    Returns ``(Bxx (n+1, nx, nx), Bxw (n, nx, nw), Bww (n, nw, nw))``.
    """
    n = len(xs) - 1
    nx, nw = cost.model.nx, cost.model.nw
    Bxx = np.zeros((n + 1, nx, nx))
    Bxw = np.zeros((n, nx, nw))
    Bww = np.zeros((n, nw, nw))
    if cost.barrier is None:
        return Bxx, Bxw, Bww
    terms = cost.barrier_terms(xs, ws)[3]
    if terms is None:
        raise NumericalError("iterate outside the barrier interior")
    d = cost.barrier.delta
    for k, g, ax, aw, curv in terms:
        c = d / g ** 2
        Bxx[k] += c * np.outer(ax, ax)
        if curv is not None:
            Bxx[k] += d / (-g) * np.asarray(curv[0])
        if k < n:
            Bxw[k] += c * np.outer(ax, aw)
            Bww[k] += c * np.outer(aw, aw)
            if curv is not None:
                Bxw[k] += d / (-g) * np.asarray(curv[1])
                Bww[k] += d / (-g) * np.asarray(curv[2])
    return Bxx, Bxw, Bww


def barrier_augment(cost, constraints):
    """Return a copy of ``cost`` with log-barrier terms for ``constraints``."""
    return replace(cost, barrier=constraints)


def recover_duals(cost, xs, ws):
    """Backward dual recursion; returns ``(duals, F list, G list, residual vector)``.

    The residual vector stacks the stationarity conditions w.r.t. ``x_0`` and
    every ``w_k``, which equals the gradient of the single-shooting cost.
    """
    model, win, w8 = cost.model, cost.window, cost.weights
    n = win.horizon
    nx, nw = model.nx, model.nw
    H = model.H
    bx = bw = None
    if cost.barrier is not None:
        _, bx, bw, _ = cost.barrier_terms(xs, ws)
        if bx is None:
            raise NumericalError("iterate outside the barrier interior")
    Fs, Gs = [], []
    for k in range(n):
        F, G = model.jac(xs[k], win.us[k], ws[k], win.dt)
        Fs.append(F)
        Gs.append(G)
    lam = np.zeros((n, nx))
    nxt = np.zeros(nx)  # lam_k for k = n
    for k in range(n, 0, -1):
        e = win.ys[k] - model.measure(xs[k])
        v = H.T @ (cost.R[k] * e)
        if bx is not None:
            v = v - bx[k]
        if k < n:
            v = v + Fs[k].T @ nxt
        lam[k - 1] = v
        nxt = v
    grad = np.empty(nx + n * nw)
    e0 = win.ys[0] - model.measure(xs[0])
    g0 = w8.P_diag * (xs[0] - win.prior_x) - H.T @ (cost.R[0] * e0)
    if bx is not None:
        g0 = g0 + bx[0]
    if n:
        g0 = g0 - Fs[0].T @ lam[0]
    grad[:nx] = g0
    for k in range(n):
        gw = cost.Q[k] * ws[k] - Gs[k].T @ lam[k]
        if bw is not None:
            gw = gw + bw[k]
        grad[nx + k * nw: nx + (k + 1) * nw] = gw
    return lam, Fs, Gs, grad


def _step_matrix(cost, xs, ws, lam, Fs, Gs, terms, exact):
    """Reduced Hessian approximation in ``z = (x_0, w)``.

    With ``exact`` the dynamics curvature contracted with the duals is
    included, which gives the exact Hessian of the single-shooting cost;
    otherwise it is the Gauss-Newton matrix.
    """
    model, win, w8 = cost.model, cost.window, cost.weights
    n = win.horizon
    nx, nw = model.nx, model.nw
    nz = nx + n * nw
    H = model.H
    M = np.zeros((nz, nz))
    S = np.zeros((nx, nz))
    S[:, :nx] = np.eye(nx)
    M[:nx, :nx] += np.diag(w8.P_diag)
    sens = [S]
    for k in range(n + 1):
        HS = H @ S
        M += HS.T @ (cost.R[k][:, None] * HS)
        if k < n:
            sl = slice(nx + k * nw, nx + (k + 1) * nw)
            M[sl, sl] += np.diag(cost.Q[k])
            if exact:
                hxx, hxw, hww = model.hess(xs[k], win.us[k], ws[k], lam[k], win.dt)
                M -= S.T @ hxx @ S
                cross = S.T @ hxw
                M[:, sl] -= cross
                M[sl, :] -= cross.T
                M[sl, sl] -= hww
            S = Fs[k] @ S
            S[:, sl] += Gs[k]
            sens.append(S)
    if terms:
        for k, g, ax, aw, _ in terms:
            row = ax @ sens[k]
            if k < n:
                row = row.copy()
                row[nx + k * nw: nx + (k + 1) * nw] += aw
            M += cost.barrier.delta / g ** 2 * np.outer(row, row)
    return M


def _unpack(z, nx, nw, n):
    return z[:nx], z[nx:].reshape(n, nw)


def solve_mhe(window, weights, model, options=None, init=None, barrier=None):
    """Solve the MHE problem for one window.

    ``init`` is an optional ``(x0, ws)`` starting guess; otherwise the prior
    and zero noise are used.  When a barrier is given the starting guess must
    be strictly feasible.
    """
    opts = options or SolverOptions()
    cost = build_cost(window, weights, model, barrier)
    n = window.horizon
    nx, nw = model.nx, model.nw
    if init is None:
        x0 = window.prior_x.copy()
        ws = np.zeros((n, nw))
    else:
        x0 = np.array(init[0], dtype=float)
        ws = np.array(init[1], dtype=float).reshape(n, nw)
    z = np.concatenate([x0, ws.reshape(-1)])
    xs = cost.rollout(x0, ws)
    J = cost.value(xs, ws)
    if not np.isfinite(J):
        if barrier is not None:
            raise ConfigError("initial guess is not strictly inside the constraint set")
        raise NumericalError("non-finite cost at the initial guess")
    tol = opts.tol * (1.0 + weights.scale()) if opts.scale_tol else opts.tol
    mu = opts.mu0
    it = 0
    lam, Fs, Gs, grad = recover_duals(cost, xs, ws)
    res = float(np.max(np.abs(grad))) if grad.size else 0.0
    exact = opts.hessian == "exact"
    while res > tol and it < opts.max_iter:
        it += 1
        terms = cost.barrier_terms(xs, ws)[3] if barrier is not None else None
        M = _step_matrix(cost, xs, ws, lam, Fs, Gs, terms, exact)
        accepted = False
        while not accepted and mu <= opts.mu_max:
            try:
                step = np.linalg.solve(M + mu * np.eye(len(z)), -grad)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            if not np.all(np.isfinite(step)):
                raise NumericalError("non-finite Gauss-Newton step")
            slope = grad @ step
            if slope >= 0:
                mu = max(mu, 1e-8) * 10.0
                continue
            slack = 1e-14 * (1.0 + abs(J))
            alpha = 1.0
            for _ in range(opts.max_backtrack):
                zt = z + alpha * step
                x0t, wst = _unpack(zt, nx, nw, n)
                try:
                    xst = cost.rollout(x0t, wst)
                    Jt = cost.value(xst, wst)
                except (ValueError, FloatingPointError):
                    Jt = np.inf
                if Jt <= J + opts.armijo * alpha * slope + slack:
                    accepted = True
                    break
                alpha *= 0.5
            if accepted:
                if alpha == 1.0:
                    mu = max(mu / 10.0, opts.mu_min)
            else:
                mu *= 10.0
        if not accepted:
            break
        z, xs, J = zt, xst, Jt
        ws = wst
        lam, Fs, Gs, grad = recover_duals(cost, xs, ws)
        prev, res = res, float(np.max(np.abs(grad))) if grad.size else 0.0
        if opts.hessian == "auto" and res > 0.25 * prev:
            # slow (linear) Gauss-Newton progress: switch to the exact Hessian
            exact = True
        if not np.isfinite(res):
            raise NumericalError("non-finite KKT residual")
        if np.max(np.abs(alpha * step)) <= 1e-15 * (1.0 + np.max(np.abs(z))):
            break
    sol = MheSolution(xs.copy(), ws.copy(), lam, float(J), res, it, res <= tol)
    if not sol.converged and opts.raise_on_failure:
        raise NonConvergenceError(
            f"MHE did not converge in {it} iterations (residual {res:.3e} > {tol:.3e})", sol)
    return sol


def shifted_guess(solution, new_horizon, slide):
    """Warm start for the next window from the previous solution.

    With ``slide`` the oldest sample is dropped; the new trailing noise is
    zero.
    """
    xs, ws = solution.xs, solution.ws
    x0, kept = (xs[1], ws[1:]) if slide else (xs[0], ws)
    pad = new_horizon - len(kept)
    if pad > 0:
        kept = np.vstack([kept, np.zeros((pad, ws.shape[1]))])
    return x0.copy(), kept[:new_horizon].copy()


def advance_window(window, solution, new_y, new_u, horizon, prior_grad_next=None):
    """Slide (or grow) the window by one sample.

    While the window is shorter than ``horizon`` it grows and keeps its
    prior.  Once full, the oldest sample is dropped and the prior becomes the
    current estimate of the new oldest state, ``solution.xs[1]``; its
    sensitivity ``prior_grad_next`` (``X_{1|t}``) is carried along, zero if
    gradients are not tracked.
    """
    new_y = np.asarray(new_y, dtype=float)[None, :]
    new_u = np.asarray(new_u, dtype=float).reshape(1, -1)
    n = window.horizon
    us = window.us if n else np.zeros((0, new_u.shape[1]))
    if n < horizon:
        return HorizonWindow(np.vstack([window.ys, new_y]), np.vstack([us, new_u]),
                             window.dt, window.prior_x, window.prior_grad)
    grad = None
    if prior_grad_next is not None:
        grad = np.array(prior_grad_next, copy=True)
    return HorizonWindow(np.vstack([window.ys[1:], new_y]), np.vstack([us[1:], new_u]),
                         window.dt, solution.xs[1].copy(), grad)
