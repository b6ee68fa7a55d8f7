"""Receding-horizon estimator wrapping the MHE solver for closed-loop use.

The weights either come from a fixed vector (DMHE) or from the network
evaluated on the newest measurement (NeuroMHE).  When gradients are enabled
the sensitivity trajectory of every solve is kept so that a learner can
back-propagate a loss defined on the window estimates.
"""
import numpy as np

from .dynamics import MEAS_IDX, QuadrotorModel
from .errors import GradientFailure, NonConvergenceError, NumericalError
from .gradkf import coeff_matrices, kf_gradient
from .mhe import HorizonWindow, SolverOptions, advance_window, shifted_guess, solve_mhe
from .neuro import map_to_weights, mlp_forward, weights_jacobian
from .weights import DEFAULT_FLOOR, WeightLayout, WeightSpec


def state_from_measurement(y, model):
    """Initial guess: measured components from ``y``, disturbances zero."""
    x = np.zeros(model.nx)
    if model.nx == 24:
        x[MEAS_IDX] = y
    else:
        x = np.linalg.lstsq(model.H, y, rcond=None)[0]
    return x


class MheEstimator:
    """Sliding-window MHE with optional gradient tracking.

    Parameters
    ----------
    horizon : int
        Window length ``N`` (number of intervals).
    weights : WeightSpec, optional
        Fixed weights (DMHE mode).
    net : MlpParams, optional
        Network producing the raw weight vector from the newest measurement.
    gradients : bool
        Run the Kalman-filter sensitivity solver after every solve.
    """

    def __init__(self, horizon=10, weights=None, net=None, model=None, gradients=False,
                 options=None, floor=DEFAULT_FLOOR):
        if (weights is None) == (net is None):
            raise ValueError("give exactly one of weights or net")
        self.model = model or QuadrotorModel()
        self.layout = WeightLayout.for_model(self.model)
        self.horizon = int(horizon)
        self.fixed = weights
        self.net = net
        self.gradients = gradients
        self.options = options or SolverOptions(raise_on_failure=False)
        self.floor = floor
        self.window = None
        self.solution = None
        self.grad = None
        self.weights = None
        self.raw = None
        self.cache = None
        self.failures = 0
        self.grad_failures = 0

    @property
    def n_theta(self):
        return self.layout.size

    def current_weights(self, y):
        if self.fixed is not None:
            self.raw, self.cache = None, None
            return self.fixed
        self.raw, self.cache = mlp_forward(self.net, y, return_cache=True)
        return map_to_weights(self.raw, self.layout, self.floor)

    def theta_jacobian(self):
        """Diagonal of ``d theta / d Theta`` at the last network output."""
        return weights_jacobian(self.raw, self.layout)

    def reset(self, y0, dt):
        x0 = state_from_measurement(np.asarray(y0, dtype=float), self.model)
        pg = np.zeros((self.model.nx, self.n_theta)) if self.gradients else None
        self.window = HorizonWindow(np.asarray(y0, dtype=float)[None, :],
                                    np.zeros((0, self.model.nu)), dt, x0, pg)
        self.solution = None
        self.grad = None
        self._started = False

    def update(self, t_index, y, u_prev):
        if self._started:
            n_old = self.window.horizon
            slide = n_old >= self.horizon
            pg = None
            if self.gradients:
                pg = self.grad.Xs[1] if (self.grad is not None and slide) else \
                    (np.zeros_like(self.window.prior_grad) if slide else self.window.prior_grad)
            self.window = advance_window(self.window, self.solution, y, u_prev, self.horizon, pg)
            init = shifted_guess(self.solution, self.window.horizon, slide)
        else:
            init = None
            self._started = True
        self.weights = self.current_weights(y)
        try:
            sol = solve_mhe(self.window, self.weights, self.model, self.options, init=init)
        except NonConvergenceError as exc:
            sol = exc.solution
        except NumericalError:
            sol = solve_mhe(self.window, self.weights, self.model, self.options)
        if not sol.converged:
            self.failures += 1
        self.solution = sol
        self.grad = None
        if self.gradients:
            try:
                coeffs = coeff_matrices(sol, self.window, self.weights, self.model)
                self.grad = kf_gradient(coeffs, self.window.prior_grad)
            except GradientFailure:
                self.grad_failures += 1
        return sol.xs[-1].copy()
