"""Small surrogate models sharing the quadrotor model's interface.

Every model exposes ``nx, nw, ny, nu``, a constant measurement matrix ``H``
and the discrete step ``f(x, u, w, dt)`` with its first derivatives
(``jac``) and the ``lam``-contracted second derivatives (``hess``).  The
MHE solver and the sensitivity code never look past this interface, which
is what lets the gradient machinery be tested at desk scale.
"""
import numpy as np


class LinearModel:
    """``x+ = A x + B u + E w`` with ``y = H x``; ``dt`` is ignored."""

    name = "linear"

    def __init__(self, A, E, H, B=None):
        self.A = np.asarray(A, dtype=float)
        self.E = np.asarray(E, dtype=float)
        self.H = np.asarray(H, dtype=float)
        self.nx = self.A.shape[0]
        self.nw = self.E.shape[1]
        self.ny = self.H.shape[0]
        self.B = np.zeros((self.nx, 1)) if B is None else np.asarray(B, dtype=float)
        self.nu = self.B.shape[1]

    def step(self, x, u, w, dt):
        return self.A @ x + self.B @ u + self.E @ w

    def jac(self, x, u, w, dt):
        return self.A, self.E

    def hess(self, x, u, w, lam, dt):
        return (np.zeros((self.nx, self.nx)), np.zeros((self.nx, self.nw)),
                np.zeros((self.nw, self.nw)))

    def measure(self, x):
        return self.H @ x

    @classmethod
    def random(cls, rng, nx=4, nw=2, ny=2):
        A = np.eye(nx) + 0.1 * rng.standard_normal((nx, nx))
        E = rng.standard_normal((nx, nw))
        H = rng.standard_normal((ny, nx))
        return cls(A, E, H)


class ToyModel:
    """Four-state nonlinear oscillator with a random-walk bias.

    ::

        q'  = q + dt * qd
        qd' = qd + dt * (-a sin q - c qd + b + u + q * w1)
        b'  = b + dt * w0
        s'  = s + dt * (qd * s * k + 0.5 * w1**2)

    The ``q * w1`` and ``w1**2`` terms make the model non-affine in the noise,
    so every Hessian block is exercised.  ``y = [q, s]``.
    """

    name = "toy"
    nx = 4
    nw = 2
    ny = 2
    nu = 1

    def __init__(self, a=2.0, c=0.3, k=0.5):
        self.a, self.c, self.k = a, c, k
        self.H = np.array([[1.0, 0, 0, 0], [0, 0, 0, 1.0]])

    def step(self, x, u, w, dt):
        q, qd, b, s = x
        a, c, k = self.a, self.c, self.k
        return np.array([
            q + dt * qd,
            qd + dt * (-a * np.sin(q) - c * qd + b + u[0] + q * w[1]),
            b + dt * w[0],
            s + dt * (k * qd * s + 0.5 * w[1] ** 2),
        ])

    def jac(self, x, u, w, dt):
        q, qd, b, s = x
        a, c, k = self.a, self.c, self.k
        F = np.eye(4)
        F[0, 1] += dt
        F[1, 0] += dt * (-a * np.cos(q) + w[1])
        F[1, 1] += -dt * c
        F[1, 2] += dt
        F[3, 1] += dt * k * s
        F[3, 3] += dt * k * qd
        G = np.zeros((4, 2))
        G[1, 1] = dt * q
        G[2, 0] = dt
        G[3, 1] = dt * w[1]
        return F, G

    def hess(self, x, u, w, lam, dt):
        q, qd, b, s = x
        a, k = self.a, self.k
        Hxx = np.zeros((4, 4))
        Hxx[0, 0] = dt * lam[1] * a * np.sin(q)
        Hxx[1, 3] = Hxx[3, 1] = dt * lam[3] * k
        Hxw = np.zeros((4, 2))
        Hxw[0, 1] = dt * lam[1]
        Hww = np.zeros((2, 2))
        Hww[1, 1] = dt * lam[3]
        return Hxx, Hxw, Hww

    def measure(self, x):
        return self.H @ x


class ScalarModel:
    """1-D random walk ``x+ = x + w`` observed directly (constraint toy)."""

    name = "scalar"
    nx = 1
    nw = 1
    ny = 1
    nu = 1

    def __init__(self):
        self.H = np.ones((1, 1))

    def step(self, x, u, w, dt):
        return x + w

    def jac(self, x, u, w, dt):
        return np.ones((1, 1)), np.ones((1, 1))

    def hess(self, x, u, w, lam, dt):
        return np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1))

    def measure(self, x):
        return self.H @ x
