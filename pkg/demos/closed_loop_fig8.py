"""Figure-8 flight under state-dependent random-walk disturbances.

Compares no compensation, perfect knowledge, and an (untrained) NeuroMHE.
"""
import warnings

from neuromhe.estimator import MheEstimator
from neuromhe.neuro import init_weight_net
from neuromhe.sim import (TruthEstimator, ZeroEstimator, disturbance_rmse, make_scenario,
                          run_closed_loop, tracking_rmse)
from neuromhe.weights import WeightLayout

warnings.simplefilter("ignore", RuntimeWarning)
sc = make_scenario("fig8", duration=10.0)
net = init_weight_net(WeightLayout(24, 18, 6, 100.0), seed=0)
for name, est in (("zero", ZeroEstimator()), ("truth", TruthEstimator()),
                  ("neuromhe (untrained)", MheEstimator(10, net=net))):
    tr = run_closed_loop(sc, est, seed=0)
    p, d = tracking_rmse(tr), disturbance_rmse(tr.d_hat, tr.d_true)
    print(f"{name:22s} position RMSE {100 * p['p']:.2f} cm  z {100 * p['pz']:.2f} cm  "
          f"force RMSE {d['d_f']:.3f} N")
