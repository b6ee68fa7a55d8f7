"""Quadrotor rigid-body dynamics augmented with random-walk disturbances.

State layout (24 entries, SI units)::

    [p(3), v(3), d_f(3), vec(R)(9), omega(3), d_tau(3)]

``vec(R)`` is row-major, i.e. ``R.reshape(9)``.  The measurement is the
quadrotor part ``[p, v, vec(R), omega]`` (18 entries), so the disturbance
blocks are invisible to ``h`` and only observable through the dynamics.
"""
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DomainError

NX = 24
NW = 6
NY = 18
NU = 4

P_SL = slice(0, 3)
V_SL = slice(3, 6)
DF_SL = slice(6, 9)
R_SL = slice(9, 18)
W_SL = slice(18, 21)
DT_SL = slice(21, 24)

#: indices of x that are measured, in measurement order
MEAS_IDX = np.r_[0:6, 9:21]
#: indices of the disturbance states [d_f, d_tau]
DIST_IDX = np.r_[6:9, 21:24]

G_DEFAULT = 9.81
G_SINGAPORE = 9.78

_EZ = np.array([0.0, 0.0, 1.0])
# basis generators e_c^x
_E = np.array([
    [[0, 0, 0], [0, 0, -1], [0, 1, 0]],
    [[0, 0, 1], [0, 0, 0], [-1, 0, 0]],
    [[0, -1, 0], [1, 0, 0], [0, 0, 0]],
], dtype=float)


@dataclass(frozen=True)
class VehicleParams:
    m: float = 0.752
    J: np.ndarray = field(default_factory=lambda: np.diag([2.52e-3, 2.14e-3, 4.36e-3]))
    g: float = G_DEFAULT

    def __post_init__(self):
        J = np.asarray(self.J, dtype=float)
        object.__setattr__(self, "J", J)
        if not self.m > 0:
            raise DomainError(f"mass must be positive, got {self.m}")
        if J.shape != (3, 3) or not np.allclose(J, J.T):
            raise DomainError("inertia must be a symmetric 3x3 matrix")
        if np.linalg.eigvalsh(J).min() <= 0:
            raise DomainError("inertia must be positive definite")

    @cached_property
    def Jinv(self):
        return np.linalg.inv(self.J)

    def __hash__(self):
        return hash((self.m, self.g, self.J.tobytes()))

    def __eq__(self, other):
        return (isinstance(other, VehicleParams) and self.m == other.m
                and self.g == other.g and np.array_equal(self.J, other.J))


def skew(v):
    """Return the 3x3 matrix ``v^x`` with ``skew(a) @ b == cross(a, b)``."""
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def vee(S):
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def project_rotation(R):
    """Nearest rotation matrix in Frobenius norm (polar projection)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


def quat_to_rot(q):
    """Rotation matrix from a unit quaternion ``[qw, qx, qy, qz]``."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rot_to_quat(R):
    """Inverse of :func:`quat_to_rot` (Shepperd's method), ``qw >= 0``."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    return q if q[0] >= 0 else -q


def rot_to_euler_zyx(R):
    """Roll, pitch, yaw for ``R = Rz(yaw) Ry(pitch) Rx(roll)``."""
    pitch = -np.arcsin(np.clip(R[2, 0], -1.0, 1.0))
    roll = np.arctan2(R[2, 1], R[2, 2])
    yaw = np.arctan2(R[1, 0], R[0, 0])
    return np.array([roll, pitch, yaw])


def euler_zyx_to_rot(roll, pitch, yaw):
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    Ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    return Rz @ Ry @ Rx


def make_state(p=None, v=None, d_f=None, R=None, omega=None, d_tau=None):
    """Assemble an augmented state; omitted blocks are zero (R defaults to I)."""
    x = np.zeros(NX)
    x[R_SL] = np.eye(3).reshape(9)
    for sl, val in ((P_SL, p), (V_SL, v), (DF_SL, d_f), (W_SL, omega), (DT_SL, d_tau)):
        if val is not None:
            x[sl] = val
    if R is not None:
        x[R_SL] = np.asarray(R, dtype=float).reshape(9)
    return x


def _check(x, u, w):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    if x.shape != (NX,) or u.shape != (NU,) or w.shape != (NW,):
        raise DomainError(f"bad shapes x{x.shape} u{u.shape} w{w.shape}")
    if not (np.isfinite(x).all() and np.isfinite(u).all() and np.isfinite(w).all()):
        raise DomainError("non-finite input to quadrotor dynamics")
    return x, u, w


def continuous_dynamics(x, u, w, params=VehicleParams()):
    """Time derivative of the augmented state."""
    x, u, w = _check(x, u, w)
    m, g = params.m, params.g
    R = x[R_SL].reshape(3, 3)
    om = x[W_SL]
    J = params.J
    xdot = np.empty(NX)
    xdot[P_SL] = x[V_SL]
    xdot[V_SL] = (-m * g * _EZ + u[0] * R[:, 2] + x[DF_SL]) / m
    xdot[DF_SL] = w[:3]
    xdot[R_SL] = (R @ skew(om)).reshape(9)
    xdot[W_SL] = params.Jinv @ (-_cross(om, J @ om) + u[1:] + x[DT_SL])
    xdot[DT_SL] = w[3:]
    return xdot


def discretize_euler(x, u, w, dt, params=VehicleParams()):
    """One forward-Euler step; this is the MHE prediction model."""
    if dt < 0:
        raise DomainError("dt must be non-negative")
    return np.asarray(x, dtype=float) + dt * continuous_dynamics(x, u, w, params)


def integrate_rk4(x, u, w, dt, params=VehicleParams()):
    """Classical RK4 step with ``u`` and ``w`` held constant (plant model)."""
    if dt < 0:
        raise DomainError("dt must be non-negative")
    x = np.asarray(x, dtype=float)
    k1 = continuous_dynamics(x, u, w, params)
    k2 = continuous_dynamics(x + 0.5 * dt * k1, u, w, params)
    k3 = continuous_dynamics(x + 0.5 * dt * k2, u, w, params)
    k4 = continuous_dynamics(x + dt * k3, u, w, params)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def measure(x):
    """Noise-free measurement ``h(x) = [p, v, vec(R), omega]``."""
    x = np.asarray(x, dtype=float)
    if x.shape != (NX,):
        raise DomainError(f"expected a {NX}-vector, got shape {x.shape}")
    return x[MEAS_IDX].copy()


def measurement_matrix():
    H = np.zeros((NY, NX))
    H[np.arange(NY), MEAS_IDX] = 1.0
    return H


_H = measurement_matrix()
_H.setflags(write=False)

_GW = np.zeros((NX, NW))
_GW[DF_SL, 0:3] = np.eye(3)
_GW[DT_SL, 3:6] = np.eye(3)
_GW.setflags(write=False)


def _cross(a, b):
    return np.array([a[1] * b[2] - a[2] * b[1],
                     a[2] * b[0] - a[0] * b[2],
                     a[0] * b[1] - a[1] * b[0]])


_IV = 3 + np.arange(3)
_IR = 9 + 3 * np.arange(3) + 2


def _state_jacobian(x, u, params):
    """d(continuous_dynamics)/dx."""
    m = params.m
    R = x[R_SL].reshape(3, 3)
    om = x[W_SL]
    J = params.J
    Jinv = params.Jinv
    A = np.zeros((NX, NX))
    A[P_SL, V_SL] = np.eye(3)
    A[V_SL, DF_SL] = np.eye(3) / m
    # v_dot_i depends on R[i, 2] through the thrust
    A[_IV, _IR] = u[0] / m
    W = skew(om)
    # d vec(R W) / d vec(R) = kron(I, W^T) for row-major vec
    for i in range(3):
        A[9 + 3 * i:12 + 3 * i, 9 + 3 * i:12 + 3 * i] = W.T
    A[R_SL, W_SL] = (R @ _E).reshape(3, 9).T
    A[W_SL, W_SL] = Jinv @ (-W @ J + skew(J @ om))
    A[W_SL, DT_SL] = Jinv
    return A


def jacobians(x, u, w, dt, params=VehicleParams()):
    """Exact Jacobians ``F = df/dx``, ``G = df/dw`` of the Euler step and ``H = dh/dx``."""
    x, u, w = _check(x, u, w)
    F = np.eye(NX) + dt * _state_jacobian(x, u, params)
    G = dt * _GW
    return F, G.copy(), _H.copy()


def dynamics_hessian_contraction(x, u, w, lam, dt, params=VehicleParams()):
    """Second derivatives of ``lam @ discretize_euler(x, u, w, dt)``.

    Returns the blocks ``(d2/dx2, d2/dxdw, d2/dw2)``.  Only the attitude
    kinematics (bilinear in R and omega) and the gyroscopic term (quadratic
    in omega) are curved; the model is affine in ``w``.
    """
    x, u, w = _check(x, u, w)
    lam = np.asarray(lam, dtype=float)
    Hxx = np.zeros((NX, NX))
    Lam = lam[R_SL].reshape(3, 3)
    # d2/dR_ab domega_c of <Lam, R omega^x> = (Lam E_c^T)_ab
    cross_blk = (Lam @ _E.transpose(0, 2, 1)).reshape(3, 9).T
    Hxx[R_SL, W_SL] = cross_blk
    Hxx[W_SL, R_SL] = cross_blk.T
    nu = params.Jinv.T @ lam[W_SL]
    SJ = skew(nu) @ params.J
    Hxx[W_SL, W_SL] = SJ + SJ.T
    Hxx *= dt
    return Hxx, np.zeros((NX, NW)), np.zeros((NW, NW))


class QuadrotorModel:
    """Discrete-time quadrotor model consumed by the MHE and gradient solvers."""

    nx = NX
    nw = NW
    ny = NY
    nu = NU
    name = "quadrotor"

    def __init__(self, params=None):
        self.params = params if params is not None else VehicleParams()
        self.H = _H

    def step(self, x, u, w, dt):
        return discretize_euler(x, u, w, dt, self.params)

    def jac(self, x, u, w, dt):
        x, u, w = _check(x, u, w)
        F = np.eye(NX) + dt * _state_jacobian(x, u, self.params)
        return F, dt * _GW

    def hess(self, x, u, w, lam, dt):
        return dynamics_hessian_contraction(x, u, w, lam, dt, self.params)

    def measure(self, x):
        return x[MEAS_IDX]
