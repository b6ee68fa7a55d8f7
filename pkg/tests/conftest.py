import numpy as np
import pytest

from neuromhe.dynamics import QuadrotorModel, euler_zyx_to_rot, integrate_rk4, make_state, measure
from neuromhe.mhe import HorizonWindow
from neuromhe.models import LinearModel, ToyModel
from neuromhe.weights import WeightLayout, WeightSpec


def random_weights(rng, layout, lo=0.5, hi=5.0):
    theta = rng.uniform(lo, hi, layout.size)
    theta[list(layout.gamma_indices)] = rng.uniform(0.6, 0.95, 2)
    return WeightSpec.from_theta(theta, layout)


def toy_instance(rng, n=3, model=None, noise=0.05, wstd=0.3, prior_grad=True):
    """Random window for a small model, with a random prior gradient."""
    model = model or ToyModel()
    lay = WeightLayout.for_model(model)
    x = rng.normal(scale=0.5, size=model.nx)
    xs = [x]
    us = 0.1 * rng.normal(size=(n, model.nu))
    for k in range(n):
        xs.append(model.step(xs[-1], us[k], wstd * rng.normal(size=model.nw), 0.1))
    ys = np.array([model.measure(v) for v in xs]) + noise * rng.normal(size=(n + 1, model.ny))
    pg = 0.1 * rng.normal(size=(model.nx, lay.size)) if prior_grad else None
    win = HorizonWindow(ys, us, 0.1, xs[0] + 0.05 * rng.normal(size=model.nx), pg)
    return model, win, random_weights(rng, lay)


def quad_instance(rng, n=3, noise=0.01, wstd=0.5, prior_grad=True):
    model = QuadrotorModel()
    lay = WeightLayout.for_model(model)
    R = euler_zyx_to_rot(*rng.uniform(-0.3, 0.3, 3))
    x = make_state(p=rng.normal(size=3), v=rng.normal(size=3), d_f=rng.normal(size=3), R=R,
                   omega=rng.normal(scale=0.5, size=3), d_tau=0.01 * rng.normal(size=3))
    dt = 0.01
    us = np.tile([7.4, 0.0, 0.0, 0.0], (n, 1)) + 0.01 * rng.normal(size=(n, 4))
    xs = [x]
    for k in range(n):
        xs.append(integrate_rk4(xs[-1], us[k], wstd * rng.normal(size=6), dt))
    ys = np.array([measure(v) for v in xs]) + noise * rng.normal(size=(n + 1, 18))
    pg = 0.1 * rng.normal(size=(24, lay.size)) if prior_grad else None
    win = HorizonWindow(ys, us, dt, xs[0] + 0.01 * rng.normal(size=24), pg)
    theta = rng.uniform(0.5, 5.0, lay.size)
    theta[list(lay.gamma_indices)] = rng.uniform(0.6, 0.95, 2)
    return model, win, WeightSpec.from_theta(theta, lay)


def linear_instance(rng, n=4, nx=4, nw=2, ny=2):
    model = LinearModel.random(rng, nx, nw, ny)
    return toy_instance(rng, n, model)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- session bookkeeping for the acceptance suite --------------------------

UNIT_SESSION = {"passed": 0, "failed": [], "start": None, "end": None}


def _is_acceptance(nodeid):
    return "test_acceptance" in nodeid


def pytest_collection_modifyitems(session, config, items):
    # acceptance checks run last so the invariant-suite criterion can read the unit results
    items.sort(key=lambda it: _is_acceptance(it.nodeid))


def pytest_runtest_logreport(report):
    import time

    if _is_acceptance(report.nodeid):
        return
    now = time.perf_counter()
    if UNIT_SESSION["start"] is None:
        UNIT_SESSION["start"] = now - report.duration
    UNIT_SESSION["end"] = now
    if report.failed:
        UNIT_SESSION["failed"].append(report.nodeid)
    elif report.when == "call" and report.passed:
        UNIT_SESSION["passed"] += 1
