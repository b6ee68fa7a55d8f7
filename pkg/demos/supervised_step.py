"""Supervised training on a synthetic flight with a force step plus sinusoids."""
import warnings

import numpy as np

from neuromhe.dynamics import DIST_IDX
from neuromhe.neuro import init_weight_net
from neuromhe.sim import disturbance_rmse, make_scenario, settling_time, simulate_flight_data
from neuromhe.train import LossSpec, TrainConfig, evaluate_dataset, train_supervised
from neuromhe.weights import WeightLayout

warnings.simplefilter("ignore", RuntimeWarning)
sc = make_scenario("step-sine", duration=4.0, dt=2.5e-3, event_time=2.0)
train_ds, _ = simulate_flight_data(sc, seed=0)
test_ds, _ = simulate_flight_data(sc, seed=1)
net = init_weight_net(WeightLayout(24, 18, 6, 100.0), hidden=(100, 100), seed=0)


def report(tag, net):
    dh = evaluate_dataset(test_ds, net=net, with_control=True)[:, DIST_IDX]
    truth = test_ds.d_external
    ts = settling_time(test_ds.t, dh[:, 2], truth[:, 2], sc.event_time, 0.2)
    print(f"{tag:10s} d_f RMSE {disturbance_rmse(dh, truth)['d_f']:.3f} N, "
          f"d_fz settling {ts:.3f} s, max |err| after step "
          f"{np.abs(dh[800:, 2] - truth[800:, 2]).max():.3f} N")


report("untrained", net)
net, losses = train_supervised(train_ds, net, 2, TrainConfig(lr=1e-3, loss=LossSpec("estimation")),
                               with_control=True)
report("trained", net)
