"""MHE weighting vector: layout, validation and horizon expansion.

The tunable vector is laid out as::

    theta = [P_1..P_nx, gamma1, R_2..R_ny, gamma2, Q_1..Q_nw]

where ``R_1`` is held fixed (100 for the quadrotor) and excluded from theta.
For the 24-state quadrotor this gives 24 + 1 + 17 + 1 + 6 = 49 entries.
Inside a window of horizon ``n`` (samples ``0..n``, ``n`` = newest)::

    R_k = gamma1**(n - k) * R_t          k = 0..n
    Q_k = gamma2**(n - 1 - k) * Q_{t-1}  k = 0..n-1
"""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

DEFAULT_FLOOR = 1e-4
R_FIXED_QUADROTOR = 100.0


@dataclass(frozen=True)
class WeightLayout:
    nx: int
    ny: int
    nw: int
    r_fixed: float | None = R_FIXED_QUADROTOR

    @property
    def n_fixed(self):
        return 0 if self.r_fixed is None else 1

    @property
    def n_r(self):
        return self.ny - self.n_fixed

    @property
    def size(self):
        return self.nx + 1 + self.n_r + 1 + self.nw

    @property
    def p_slice(self):
        return slice(0, self.nx)

    @property
    def gamma1_index(self):
        return self.nx

    @property
    def r_slice(self):
        return slice(self.nx + 1, self.nx + 1 + self.n_r)

    @property
    def gamma2_index(self):
        return self.nx + 1 + self.n_r

    @property
    def q_slice(self):
        return slice(self.nx + 2 + self.n_r, self.size)

    @property
    def gamma_indices(self):
        return (self.gamma1_index, self.gamma2_index)

    @classmethod
    def for_model(cls, model, r_fixed="auto"):
        if r_fixed == "auto":
            r_fixed = R_FIXED_QUADROTOR if getattr(model, "name", "") == "quadrotor" else None
        return cls(model.nx, model.ny, model.nw, r_fixed)


@dataclass
class WeightSpec:
    """Diagonal MHE weights and forgetting factors.

    ``R_diag`` always holds all ``ny`` entries, including the fixed first one.
    """

    P_diag: np.ndarray
    gamma1: float
    R_diag: np.ndarray
    gamma2: float
    Q_diag: np.ndarray
    layout: WeightLayout
    floor: float = DEFAULT_FLOOR

    def __post_init__(self):
        self.P_diag = np.asarray(self.P_diag, dtype=float)
        self.R_diag = np.asarray(self.R_diag, dtype=float)
        self.Q_diag = np.asarray(self.Q_diag, dtype=float)
        self.gamma1 = float(self.gamma1)
        self.gamma2 = float(self.gamma2)
        self.validate()

    def validate(self):
        lay = self.layout
        if self.P_diag.shape != (lay.nx,) or self.R_diag.shape != (lay.ny,) \
                or self.Q_diag.shape != (lay.nw,):
            raise ConfigError("weight diagonals do not match the layout")
        for name, d in (("P", self.P_diag), ("R", self.R_diag), ("Q", self.Q_diag)):
            if not np.all(np.isfinite(d)):
                raise ConfigError(f"{name} weights must be finite")
            if np.any(d < self.floor):
                raise ConfigError(f"{name} weights must be >= {self.floor}, got min {d.min():.3g}")
        for name, g in (("gamma1", self.gamma1), ("gamma2", self.gamma2)):
            if not 0.0 < g < 1.0:
                raise ConfigError(f"{name} must lie strictly inside (0, 1), got {g}")
        if lay.r_fixed is not None and self.R_diag[0] != lay.r_fixed:
            raise ConfigError(f"R_1 is fixed at {lay.r_fixed}")

    @classmethod
    def from_theta(cls, theta, layout, floor=DEFAULT_FLOOR):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (layout.size,):
            raise ConfigError(f"theta must have length {layout.size}, got {theta.shape}")
        R = theta[layout.r_slice]
        if layout.r_fixed is not None:
            R = np.concatenate([[layout.r_fixed], R])
        return cls(theta[layout.p_slice].copy(), theta[layout.gamma1_index], R,
                   theta[layout.gamma2_index], theta[layout.q_slice].copy(), layout, floor)

    @classmethod
    def uniform(cls, layout, p=1.0, r=1.0, q=1.0, gamma1=0.9, gamma2=0.9, floor=DEFAULT_FLOOR):
        R = np.full(layout.ny, float(r))
        if layout.r_fixed is not None:
            R[0] = layout.r_fixed
        return cls(np.full(layout.nx, float(p)), gamma1, R, gamma2,
                   np.full(layout.nw, float(q)), layout, floor)

    def to_theta(self):
        lay = self.layout
        theta = np.empty(lay.size)
        theta[lay.p_slice] = self.P_diag
        theta[lay.gamma1_index] = self.gamma1
        theta[lay.r_slice] = self.R_diag[lay.n_fixed:]
        theta[lay.gamma2_index] = self.gamma2
        theta[lay.q_slice] = self.Q_diag
        return theta

    def R_at(self, k, n):
        return self.gamma1 ** (n - k) * self.R_diag

    def Q_at(self, k, n):
        return self.gamma2 ** (n - 1 - k) * self.Q_diag

    def scale(self):
        return float(max(self.P_diag.max(), self.R_diag.max(), self.Q_diag.max()))
