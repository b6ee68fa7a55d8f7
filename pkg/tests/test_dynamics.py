import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neuromhe.dynamics import (DIST_IDX, MEAS_IDX, NX, QuadrotorModel, VehicleParams,
                               continuous_dynamics, discretize_euler, dynamics_hessian_contraction,
                               euler_zyx_to_rot, integrate_rk4, jacobians, make_state, measure,
                               measurement_matrix, project_rotation, quat_to_rot, rot_to_euler_zyx,
                               rot_to_quat, skew, vee)
from neuromhe.errors import DomainError
from neuromhe.models import LinearModel, ToyModel


def random_state(rng):
    R = euler_zyx_to_rot(*rng.uniform(-0.6, 0.6, 3))
    return make_state(p=rng.normal(size=3), v=rng.normal(size=3), d_f=rng.normal(size=3),
                      R=R, omega=rng.normal(size=3), d_tau=0.01 * rng.normal(size=3))


def fd_jac(f, x, h=1e-6):
    f0 = f(x)
    J = np.zeros((len(f0), len(x)))
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        J[:, i] = (f(x + e) - f(x - e)) / (2 * h)
    return J


def test_hover_equilibrium():
    p = VehicleParams()
    x = make_state(p=[0, 0, 1.0])
    u = np.array([p.m * p.g, 0, 0, 0])
    assert np.allclose(continuous_dynamics(x, u, np.zeros(6), p), 0.0)


def test_free_fall_rk4():
    p = VehicleParams()
    x = make_state()
    x1 = integrate_rk4(x, np.zeros(4), np.zeros(6), 0.01, p)
    assert abs(x1[5] - (-p.g * 0.01)) < 1e-9
    assert abs(x1[2] - (-0.5 * p.g * 0.01 ** 2)) < 1e-12


def test_disturbance_is_random_walk():
    rng = np.random.default_rng(0)
    x = random_state(rng)
    w = rng.normal(size=6)
    x1 = discretize_euler(x, np.zeros(4), w, 0.01)
    assert np.allclose(x1[DIST_IDX] - x[DIST_IDX], 0.01 * w)


@pytest.mark.parametrize("seed", range(5))
def test_jacobians_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x, u, w = random_state(rng), np.array([7.0, 0.01, -0.02, 0.005]), rng.normal(size=6)
    dt = 0.01
    F, G, H = jacobians(x, u, w, dt)
    Ffd = fd_jac(lambda z: discretize_euler(z, u, w, dt), x)
    Gfd = fd_jac(lambda z: discretize_euler(x, u, z, dt), w)
    assert np.max(np.abs(F - Ffd)) < 1e-8 * max(1, np.abs(F).max())
    assert np.max(np.abs(G - Gfd)) < 1e-9
    assert np.array_equal(H, measurement_matrix())


@pytest.mark.parametrize("seed", range(5))
def test_hessian_contraction_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x, u, w = random_state(rng), np.array([7.0, 0.01, -0.02, 0.005]), rng.normal(size=6)
    lam = rng.normal(size=NX)
    dt = 0.01
    Hxx, Hxw, Hww = dynamics_hessian_contraction(x, u, w, lam, dt)
    grad = lambda z: jacobians(z, u, w, dt)[0].T @ lam  # noqa: E731
    Hfd = fd_jac(grad, x)
    assert np.max(np.abs(Hxx - Hfd)) < 1e-7
    assert np.allclose(Hxx, Hxx.T)
    assert not Hxw.any() and not Hww.any()


@pytest.mark.parametrize("model", [ToyModel(), LinearModel.random(np.random.default_rng(3))])
def test_surrogate_models_derivatives(model):
    rng = np.random.default_rng(1)
    x, w, u = rng.normal(size=model.nx), rng.normal(size=model.nw), rng.normal(size=model.nu)
    lam = rng.normal(size=model.nx)
    dt = 0.1
    F, G = model.jac(x, u, w, dt)
    assert np.allclose(F, fd_jac(lambda z: model.step(z, u, w, dt), x), atol=1e-8)
    assert np.allclose(G, fd_jac(lambda z: model.step(x, u, z, dt), w), atol=1e-8)
    hxx, hxw, hww = model.hess(x, u, w, lam, dt)
    assert np.allclose(hxx, fd_jac(lambda z: model.jac(z, u, w, dt)[0].T @ lam, x), atol=1e-7)
    assert np.allclose(hxw, fd_jac(lambda z: model.jac(x, u, z, dt)[0].T @ lam, w), atol=1e-7)
    assert np.allclose(hww, fd_jac(lambda z: model.jac(x, u, z, dt)[1].T @ lam, w), atol=1e-7)


def test_measurement_layout():
    rng = np.random.default_rng(2)
    x = random_state(rng)
    y = measure(x)
    assert y.shape == (18,)
    assert np.array_equal(y, x[MEAS_IDX])
    assert np.array_equal(measurement_matrix() @ x, y)


def test_model_wrapper_consistent():
    m = QuadrotorModel()
    rng = np.random.default_rng(4)
    x, u, w = random_state(rng), np.array([7.0, 0, 0, 0]), rng.normal(size=6)
    assert np.array_equal(m.step(x, u, w, 0.01), discretize_euler(x, u, w, 0.01))
    F, G = m.jac(x, u, w, 0.01)
    F2, G2, _ = jacobians(x, u, w, 0.01)
    assert np.array_equal(F, F2) and np.array_equal(G, G2)


def test_domain_errors():
    with pytest.raises(DomainError):
        continuous_dynamics(np.zeros(5), np.zeros(4), np.zeros(6))
    x = make_state()
    x[0] = np.nan
    with pytest.raises(DomainError):
        continuous_dynamics(x, np.zeros(4), np.zeros(6))
    with pytest.raises(DomainError):
        VehicleParams(m=-1.0)
    with pytest.raises(DomainError):
        integrate_rk4(make_state(), np.zeros(4), np.zeros(6), -0.1)


angles = st.floats(-1.4, 1.4)


@settings(max_examples=60, deadline=None)
@given(angles, angles, st.floats(-3.1, 3.1))
def test_rotation_round_trips(r, p, y):
    R = euler_zyx_to_rot(r, p, y)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.allclose(rot_to_euler_zyx(R), [r, p, y], atol=1e-9)
    assert np.allclose(quat_to_rot(rot_to_quat(R)), R, atol=1e-12)
    noisy = R + 1e-3 * np.sin(np.arange(9)).reshape(3, 3)
    Rp = project_rotation(noisy)
    assert np.allclose(Rp @ Rp.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(Rp) > 0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3),
       st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_skew_vee(a, b):
    a, b = np.array(a), np.array(b)
    assert np.allclose(skew(a) @ b, np.cross(a, b))
    assert np.array_equal(vee(skew(a)), a)


def test_rk4_preserves_rotation_closely():
    x = make_state(omega=[0.5, -0.3, 1.0])
    for _ in range(100):
        x = integrate_rk4(x, np.zeros(4), np.zeros(6), 0.01)
    R = x[9:18].reshape(3, 3)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-6)
