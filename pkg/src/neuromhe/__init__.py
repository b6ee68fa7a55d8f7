"""Neural moving horizon estimation for quadrotor disturbance estimation.

The MHE weighting matrices are generated online by a small network and
learned end to end through an analytic, Kalman-filter based gradient of the
MHE solution.
"""
from .dynamics import QuadrotorModel, VehicleParams
from .errors import (ConfigError, DomainError, GradientFailure, NonConvergenceError,
                     NumericalError, ParseError)
from .gradkf import coeff_matrices, dense_kkt_gradient, kf_gradient
from .mhe import HorizonWindow, MheSolution, SolverOptions, solve_mhe
from .weights import WeightLayout, WeightSpec

__version__ = "0.1.0"
