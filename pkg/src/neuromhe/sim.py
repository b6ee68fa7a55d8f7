"""Closed-loop simulation: plant, disturbances, controller and scenarios.

The plant is the augmented quadrotor model integrated with RK4 at a fixed
step.  Disturbances live in the plant state (world-frame force ``d_f``,
body-frame torque ``d_tau``) and are advanced between steps by the selected
generator; the estimator only sees noisy measurements.
"""
import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import (DF_SL, DIST_IDX, DT_SL, MEAS_IDX, NX, P_SL, R_SL, V_SL, W_SL,
                       VehicleParams, continuous_dynamics, integrate_rk4, make_state,
                       project_rotation, quat_to_rot, rot_to_euler_zyx, rot_to_quat, vee)
from .errors import ConfigError, ParseError

_EZ = np.array([0.0, 0.0, 1.0])


# --------------------------------------------------------------------------
# disturbances

@dataclass
class DisturbanceModel:
    """Coefficients of the state-dependent random-walk disturbance.

    The per-axis standard deviations of the random-walk rates are::

        sigma_f   = c_v v**2 + c_p p**2 + c_f
        sigma_tau = c_w omega**2 + c_e euler**2 + c_tau

    The z entries default to three times the x/y entries.  With ``clip`` the
    force is kept inside ``|d_fx|, |d_fy| <= 0.25 m g`` and
    ``-0.5 m g <= d_fz <= 0.1 m g``.
    """

    c_v: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5, 1.5]))
    c_p: np.ndarray = field(default_factory=lambda: np.array([0.2, 0.2, 0.6]))
    c_f: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5, 1.5]))
    c_w: np.ndarray = field(default_factory=lambda: np.array([0.01, 0.01, 0.03]))
    c_e: np.ndarray = field(default_factory=lambda: np.array([0.01, 0.01, 0.03]))
    c_tau: np.ndarray = field(default_factory=lambda: np.array([0.01, 0.01, 0.03]))
    clip: bool = True

    def __post_init__(self):
        for name in ("c_v", "c_p", "c_f", "c_w", "c_e", "c_tau"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (3,) or np.any(arr < 0) or not np.all(np.isfinite(arr)):
                raise ConfigError(f"{name} must be three non-negative numbers")
            setattr(self, name, arr)

    @classmethod
    def zero(cls):
        z = np.zeros(3)
        return cls(z, z, z, z, z, z)

    def sigma(self, x):
        x = np.asarray(x, dtype=float)
        R = x[R_SL].reshape(3, 3)
        eul = rot_to_euler_zyx(R)
        sf = self.c_v * x[V_SL] ** 2 + self.c_p * x[P_SL] ** 2 + self.c_f
        st = self.c_w * x[W_SL] ** 2 + self.c_e * eul ** 2 + self.c_tau
        return sf, st


def sample_disturbance_step(d_prev, x_true, model, dt, rng, params=VehicleParams()):
    """``d_next = d_prev + dt * w`` with ``w ~ N(0, diag(sigma(x_true))**2)``."""
    sf, st = model.sigma(x_true)
    w = rng.standard_normal(6) * np.concatenate([sf, st])
    d = np.asarray(d_prev, dtype=float) + dt * w
    if model.clip:
        mg = params.m * params.g
        d[0:2] = np.clip(d[0:2], -0.25 * mg, 0.25 * mg)
        d[2] = np.clip(d[2], -0.5 * mg, 0.1 * mg)
    return d


def ground_truth_disturbance(a_v, a_w, R, omega, params=VehicleParams()):
    """Total body-frame force and torque from measured accelerations.

    ``d_f = m R^T (a_v + g e_z)`` and ``d_tau = J a_w + omega x J omega``; both
    include the control thrust and torques.
    """
    a_v, a_w, omega = (np.asarray(a, dtype=float) for a in (a_v, a_w, omega))
    R = np.asarray(R, dtype=float)
    d_f = params.m * R.T @ (a_v + params.g * _EZ)
    d_tau = params.J @ a_w + np.cross(omega, params.J @ omega)
    return d_f, d_tau


# --------------------------------------------------------------------------
# reference trajectories

@dataclass
class RefPoint:
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    yaw: float = 0.0


def _quintic(s):
    s = np.clip(s, 0.0, 1.0)
    return 10 * s ** 3 - 15 * s ** 4 + 6 * s ** 5, \
        30 * s ** 2 - 60 * s ** 3 + 30 * s ** 4, \
        60 * s - 180 * s ** 2 + 120 * s ** 3


class HoverReference:
    """Take off from ``z0`` to ``height`` in ``t_rise`` seconds, then hover."""

    def __init__(self, height=1.0, t_rise=1.5, z0=0.0, t_start=0.0):
        self.height, self.t_rise, self.z0, self.t_start = height, t_rise, z0, t_start

    def __call__(self, t):
        s, ds, dds = _quintic((t - self.t_start) / self.t_rise)
        if t < self.t_start:
            ds = dds = 0.0
        h = self.height - self.z0
        return RefPoint(np.array([0.0, 0.0, self.z0 + h * s]),
                        np.array([0.0, 0.0, h * ds / self.t_rise]),
                        np.array([0.0, 0.0, h * dds / self.t_rise ** 2]))


class Figure8Reference:
    """Take off, fly a figure-8, then land.

    The figure-8 is ``x = A sin(phi)``, ``y = B sin(2 phi)`` where the phase
    rate ramps smoothly from zero to ``omega`` and back, so the reference is
    twice differentiable everywhere.
    """

    def __init__(self, duration=10.0, height=1.0, A=1.5, B=0.75, omega=0.8,
                 t_takeoff=1.5, t_land=1.5, t_ramp=1.0):
        if duration <= t_takeoff + t_land + 2 * t_ramp:
            raise ConfigError("figure-8 duration too short for its takeoff/landing phases")
        self.duration, self.height, self.A, self.B, self.omega = duration, height, A, B, omega
        self.t_takeoff, self.t_land, self.t_ramp = t_takeoff, t_land, t_ramp
        self.t0 = t_takeoff
        self.t1 = duration - t_land
        # phase accumulated during one ramp
        self._ramp_phase = 0.5 * omega * t_ramp

    def _phase(self, t):
        w, tr, t0, t1 = self.omega, self.t_ramp, self.t0, self.t1
        if t <= t0:
            return 0.0, 0.0, 0.0
        if t < t0 + tr:
            u = (t - t0) / tr
            s = 3 * u ** 2 - 2 * u ** 3
            return w * tr * (u ** 3 - 0.5 * u ** 4), w * s, w * (6 * u - 6 * u ** 2) / tr
        mid_end = t1 - tr
        if t <= mid_end:
            return self._ramp_phase + w * (t - t0 - tr), w, 0.0
        base = self._ramp_phase + w * (mid_end - t0 - tr)
        if t < t1:
            u = (t - mid_end) / tr
            s = 1 - (3 * u ** 2 - 2 * u ** 3)
            ph = base + w * tr * (u - (u ** 3 - 0.5 * u ** 4))
            return ph, w * s, -w * (6 * u - 6 * u ** 2) / tr
        return base + self._ramp_phase, 0.0, 0.0

    def __call__(self, t):
        ph, dph, ddph = self._phase(t)
        A, B = self.A, self.B
        p = np.array([A * np.sin(ph), B * np.sin(2 * ph), 0.0])
        v = np.array([A * np.cos(ph) * dph, 2 * B * np.cos(2 * ph) * dph, 0.0])
        a = np.array([-A * np.sin(ph) * dph ** 2 + A * np.cos(ph) * ddph,
                      -4 * B * np.sin(2 * ph) * dph ** 2 + 2 * B * np.cos(2 * ph) * ddph, 0.0])
        if t < self.t1:
            s, ds, dds = _quintic(t / self.t_takeoff)
        else:
            s, ds, dds = _quintic(1.0 - (t - self.t1) / self.t_land)
            ds, dds = -ds, dds
        tt = self.t_takeoff if t < self.t1 else self.t_land
        p[2] = self.height * s
        v[2] = self.height * ds / tt
        a[2] = self.height * dds / tt ** 2
        return RefPoint(p, v, a)


# --------------------------------------------------------------------------
# controller

@dataclass
class ControllerGains:
    kp: np.ndarray = field(default_factory=lambda: np.array([16.0, 16.0, 16.0]))
    kv: np.ndarray = field(default_factory=lambda: np.array([8.0, 8.0, 8.0]))
    kR: np.ndarray = field(default_factory=lambda: np.array([1.5, 1.5, 1.0]))
    kw: np.ndarray = field(default_factory=lambda: np.array([0.1, 0.1, 0.12]))
    f_max: float = 2.5      # in units of m g
    tau_max: float = 0.5

    def __post_init__(self):
        for name in ("kp", "kv", "kR", "kw"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (3,) or np.any(arr < 0):
                raise ConfigError(f"gain {name} must be three non-negative numbers")
            setattr(self, name, arr)
        if self.f_max <= 0 or self.tau_max <= 0:
            raise ConfigError("actuator limits must be positive")


def baseline_controller(y, ref, d_hat, gains=None, params=VehicleParams()):
    """Geometric tracking controller with disturbance feedforward.

    ``y`` is the quadrotor state ``[p, v, vec(R), omega]`` (a measurement or
    estimate), ``d_hat = [d_f (world), d_tau (body)]``.  Returns
    ``u = [f, tau_x, tau_y, tau_z]``.
    """
    gains = gains or ControllerGains()
    y = np.asarray(y, dtype=float)
    d_hat = np.zeros(6) if d_hat is None else np.asarray(d_hat, dtype=float)
    m, g, J = params.m, params.g, params.J
    p, v = y[0:3], y[3:6]
    R = project_rotation(y[6:15].reshape(3, 3))
    om = y[15:18]
    ep, ev = p - ref.p, v - ref.v
    Fd = m * (-gains.kp * ep - gains.kv * ev + g * _EZ + ref.a) - d_hat[0:3]
    nF = np.linalg.norm(Fd)
    b3 = Fd / nF if nF > 1e-9 else _EZ
    b1c = np.array([np.cos(ref.yaw), np.sin(ref.yaw), 0.0])
    b2 = np.cross(b3, b1c)
    b2 /= np.linalg.norm(b2)
    Rd = np.column_stack([np.cross(b2, b3), b2, b3])
    f = float(np.clip(Fd @ R[:, 2], 0.0, gains.f_max * m * g))
    eR = 0.5 * vee(Rd.T @ R - R.T @ Rd)
    tau = -gains.kR * eR - gains.kw * om + np.cross(om, J @ om) - d_hat[3:6]
    tau = np.clip(tau, -gains.tau_max, gains.tau_max)
    return np.concatenate([[f], tau])


# --------------------------------------------------------------------------
# scenarios

@dataclass
class Scenario:
    """Closed-loop experiment definition.

    ``mode`` is one of ``random-walk`` (state-dependent random walk),
    ``payload-step`` (constant force ``-step_force`` along z from
    ``event_time``), ``downwash`` (force pulse of ``pulse_force`` along z over
    ``[event_time, event_time + pulse_width]``) or ``step-sine`` (step plus a
    sinusoid on every force/torque axis).
    """

    name: str
    reference: object
    duration: float = 10.0
    dt: float = 0.01
    mode: str = "random-walk"
    disturbance: DisturbanceModel = field(default_factory=DisturbanceModel)
    noise_std: float = 1e-3
    event_time: float = 3.0
    step_force: float = 2.0
    pulse_force: float = 7.0
    pulse_width: float = 1.0
    sine_amp: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5, 1.0, 0.005, 0.005, 0.003]))
    sine_freq: float = 0.5
    params: VehicleParams = field(default_factory=VehicleParams)
    x0: np.ndarray | None = None

    def __post_init__(self):
        if not self.duration > 0 or not self.dt > 0:
            raise ConfigError("scenario duration and dt must be positive")
        if self.mode not in ("random-walk", "payload-step", "downwash", "step-sine", "none"):
            raise ConfigError(f"unknown disturbance mode {self.mode!r}")
        if self.noise_std < 0:
            raise ConfigError("measurement noise std must be non-negative")

    @property
    def n_steps(self):
        return int(round(self.duration / self.dt))

    def initial_state(self):
        if self.x0 is not None:
            return np.array(self.x0, dtype=float)
        r = self.reference(0.0)
        return make_state(p=r.p, v=r.v)

    def scripted_disturbance(self, t):
        d = np.zeros(6)
        if self.mode == "payload-step" and t >= self.event_time:
            d[2] = -self.step_force
        elif self.mode == "downwash" and self.event_time <= t < self.event_time + self.pulse_width:
            d[2] = -self.pulse_force
        elif self.mode == "step-sine":
            if t >= self.event_time:
                d[2] = -self.step_force
            d += self.sine_amp * np.sin(2 * np.pi * self.sine_freq * t + np.arange(6))
        return d


SCENARIOS = ("fig8", "hover", "payload-step", "downwash", "step-sine")


def make_scenario(name, duration=None, dt=0.01, **kw):
    """Named scenario factory."""
    if name == "fig8":
        duration = duration or 10.0
        return Scenario("fig8", Figure8Reference(duration), duration, dt, "random-walk", **kw)
    if name == "hover":
        duration = duration or 6.0
        return Scenario("hover", HoverReference(), duration, dt, "none", **kw)
    if name == "payload-step":
        duration = duration or 8.0
        return Scenario("payload-step", HoverReference(), duration, dt, "payload-step", **kw)
    if name == "downwash":
        duration = duration or 8.0
        return Scenario("downwash", HoverReference(), duration, dt, "downwash", **kw)
    if name == "step-sine":
        duration = duration or 4.0
        return Scenario("step-sine", HoverReference(), duration, dt, "step-sine", **kw)
    raise ConfigError(f"unknown scenario {name!r}")


# --------------------------------------------------------------------------
# estimators

class ZeroEstimator:
    """No disturbance compensation; the state estimate is the measurement."""

    def reset(self, y0, dt):
        pass

    def update(self, t_index, y, u_prev):
        x = np.zeros(NX)
        x[MEAS_IDX] = y
        return x


class TruthEstimator:
    """Oracle returning the true state (used to bound achievable tracking)."""

    def __init__(self):
        self.x_true = None

    def reset(self, y0, dt):
        pass

    def update(self, t_index, y, u_prev):
        return self.x_true.copy()


# --------------------------------------------------------------------------
# closed loop

TRACE_COLUMNS = (
    ["t"] + [f"p{a}" for a in "xyz"] + [f"v{a}" for a in "xyz"]
    + ["roll", "pitch", "yaw"] + [f"w{a}" for a in "xyz"]
    + [f"df{a}" for a in "xyz"] + [f"dt{a}" for a in "xyz"]
    + [f"df{a}_hat" for a in "xyz"] + [f"dt{a}_hat" for a in "xyz"]
    + [f"p{a}_hat" for a in "xyz"] + [f"p{a}_ref" for a in "xyz"]
    + ["f", "taux", "tauy", "tauz", "loss", "kkt", "skipped"]
)


@dataclass
class TraceLog:
    t: np.ndarray
    x_true: np.ndarray      # (T, 24), disturbance slots hold the truth
    x_hat: np.ndarray       # (T, 24)
    p_ref: np.ndarray       # (T, 3)
    u: np.ndarray           # (T, 4)
    loss: np.ndarray        # (T,)
    kkt: np.ndarray         # (T,)
    skipped: np.ndarray     # (T,) bool
    aborted: bool = False
    message: str = ""

    def __len__(self):
        return len(self.t)

    @property
    def d_true(self):
        return self.x_true[:, DIST_IDX]

    @property
    def d_hat(self):
        return self.x_hat[:, DIST_IDX]

    def rows(self):
        for i in range(len(self.t)):
            xt = self.x_true[i]
            eul = rot_to_euler_zyx(xt[R_SL].reshape(3, 3))
            yield np.concatenate([[self.t[i]], xt[P_SL], xt[V_SL], eul, xt[W_SL],
                                  xt[DF_SL], xt[DT_SL], self.x_hat[i, DF_SL], self.x_hat[i, DT_SL],
                                  self.x_hat[i, P_SL], self.p_ref[i], self.u[i],
                                  [self.loss[i], self.kkt[i], float(self.skipped[i])]])

    def digest(self):
        h = hashlib.sha256()
        for a in (self.t, self.x_true, self.x_hat, self.u):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()

    def to_csv(self, path, config_hash=""):
        with open(path, "w", newline="") as fh:
            fh.write(f"# config-hash: {config_hash}\n")
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for r in self.rows():
                w.writerow([repr(float(v)) for v in r])


def run_closed_loop(scenario, estimator, gains=None, seed=0, feedforward=True,
                    step_hook=None, divergence_bound=1e3):
    """Simulate one episode.

    Each step: measure (with noise), update the estimator, compute the
    control from the measured quadrotor state and the estimated disturbance,
    integrate the plant, advance the disturbance.  ``step_hook(k, t, x_hat)``
    may return ``(loss, kkt, skipped)`` for logging; it is how the learning
    loops attach to the rollout.
    """
    rng = np.random.default_rng(seed)
    sc = scenario
    params = sc.params
    n = sc.n_steps
    x = sc.initial_state()
    d_rw = x[DIST_IDX].copy()
    ts = np.arange(n) * sc.dt
    X = np.zeros((n, NX))
    Xh = np.zeros((n, NX))
    Pr = np.zeros((n, 3))
    U = np.zeros((n, 4))
    L = np.full(n, np.nan)
    K = np.full(n, np.nan)
    S = np.zeros(n, dtype=bool)
    u_prev = np.array([params.m * params.g, 0.0, 0.0, 0.0])
    y0 = x[MEAS_IDX] + sc.noise_std * rng.standard_normal(len(MEAS_IDX))
    estimator.reset(y0, sc.dt)
    aborted, msg = False, ""
    last = n
    for k in range(n):
        t = ts[k]
        x[DIST_IDX] = d_rw + sc.scripted_disturbance(t)
        y = y0 if k == 0 else x[MEAS_IDX] + sc.noise_std * rng.standard_normal(len(MEAS_IDX))
        if isinstance(estimator, TruthEstimator):
            estimator.x_true = x
        xh = estimator.update(k, y, u_prev)
        ref = sc.reference(t)
        d_ff = xh[DIST_IDX] if feedforward else np.zeros(6)
        u = baseline_controller(y, ref, d_ff, gains, params)
        X[k], Xh[k], Pr[k], U[k] = x, xh, ref.p, u
        if step_hook is not None:
            out = step_hook(k, t, xh)
            if out is not None:
                L[k], K[k], S[k] = out
        x = integrate_rk4(x, u, np.zeros(6), sc.dt, params)
        x[R_SL] = project_rotation(x[R_SL].reshape(3, 3)).reshape(9)
        if sc.mode == "random-walk":
            d_rw = sample_disturbance_step(d_rw, x, sc.disturbance, sc.dt, rng, params)
        u_prev = u
        if not np.all(np.isfinite(x)) or np.abs(x).max() > divergence_bound:
            aborted, msg, last = True, f"plant diverged at t={t:.3f}s", k + 1
            break
    sl = slice(0, last)
    return TraceLog(ts[sl], X[sl], Xh[sl], Pr[sl], U[sl], L[sl], K[sl], S[sl], aborted, msg)


# --------------------------------------------------------------------------
# metrics

def rmse(a, b=None, axis=0):
    a = np.asarray(a, dtype=float)
    e = a if b is None else a - np.asarray(b, dtype=float)
    return np.sqrt(np.mean(e ** 2, axis=axis))


def disturbance_rmse(d_hat, d_true):
    """RMSEs of the aggregated channels used in the evaluation tables."""
    e = np.asarray(d_hat, dtype=float) - np.asarray(d_true, dtype=float)

    def agg(cols):
        return float(np.sqrt(np.mean(np.sum(e[:, cols] ** 2, axis=1))))

    return {"d_fxy": agg([0, 1]), "d_fz": agg([2]), "d_f": agg([0, 1, 2]),
            "d_txy": agg([3, 4]), "d_tz": agg([5]), "d_t": agg([3, 4, 5])}


def tracking_rmse(trace):
    e = trace.x_true[:, P_SL] - trace.p_ref
    return {"px": float(rmse(e[:, 0])), "py": float(rmse(e[:, 1])), "pz": float(rmse(e[:, 2])),
            "p": float(np.sqrt(np.mean(np.sum(e ** 2, axis=1))))}


def p_rate(metric_baseline, metric_new):
    """Relative improvement of medians in percent: ``(m_base - m_new) / m_base * 100``."""
    mb = float(np.median(metric_baseline))
    mn = float(np.median(metric_new))
    if mb == 0:
        raise ZeroDivisionError("baseline median is zero")
    return (mb - mn) / mb * 100.0


def settling_time(t, estimate, truth, t_event, band):
    """Time after ``t_event`` from which ``|estimate - truth|`` stays within ``band``.

    Returns ``inf`` if the error is still outside the band at the last sample.
    """
    t = np.asarray(t, dtype=float)
    err = np.abs(np.asarray(estimate, dtype=float) - np.asarray(truth, dtype=float))
    after = t >= t_event
    bad = np.nonzero(after & (err > band))[0]
    if len(bad) == 0:
        return 0.0
    if bad[-1] == len(t) - 1:
        return float("inf")
    return float(t[bad[-1] + 1] - t_event)


def config_hash(obj):
    """Short stable hash of a JSON-serializable configuration."""
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if hasattr(o, "__dict__"):
            return {k: v for k, v in vars(o).items() if not k.startswith("_")}
        return str(o)
    blob = json.dumps(obj, sort_keys=True, default=default).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# --------------------------------------------------------------------------
# flight dataset

DATASET_COLUMNS = ("t,px,py,pz,vx,vy,vz,qw,qx,qy,qz,wx,wy,wz,"
                   "avx,avy,avz,awx,awy,awz,f,taux,tauy,tauz").split(",")


@dataclass
class FlightDataset:
    t: np.ndarray           # (T,)
    y: np.ndarray           # (T, 18) measurement [p, v, vec(R), omega]
    u: np.ndarray           # (T, 4)
    a_v: np.ndarray         # (T, 3) world-frame linear acceleration
    a_w: np.ndarray         # (T, 3) body angular acceleration
    d_body: np.ndarray      # (T, 6) ground truth: total body force, total torque
    summary: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    @property
    def d_world(self):
        """Ground truth with the force rotated into the world frame."""
        out = self.d_body.copy()
        for i in range(len(self.t)):
            out[i, :3] = self.y[i, 6:15].reshape(3, 3) @ self.d_body[i, :3]
        return out

    @property
    def d_external(self):
        """World-frame ground truth with the commanded thrust and torque removed.

        This is the target when the estimator is given the recorded control.
        """
        out = self.d_world
        out[:, :3] -= self.y[:, [8, 11, 14]] * self.u[:, :1]
        out[:, 3:] -= self.u[:, 1:]
        return out


def write_flight_dataset(path, t, p, v, R, omega, a_v, a_w, u, config_hash_value=""):
    """Write the documented CSV schema (rotations stored as quaternions)."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# config-hash: {config_hash_value}\n")
        w = csv.writer(fh)
        w.writerow(DATASET_COLUMNS)
        for i in range(len(t)):
            q = rot_to_quat(R[i])
            row = np.concatenate([[t[i]], p[i], v[i], q, omega[i], a_v[i], a_w[i], u[i]])
            w.writerow([repr(float(c)) for c in row])
    return Path(path)


def load_flight_dataset(path, expected_dt=2.5e-3, dt_tol=0.1, params=VehicleParams()):
    """Parse a flight CSV and derive ground-truth disturbances.

    Timestamps must be strictly increasing; with ``expected_dt`` every
    spacing must lie within ``dt_tol`` (relative) of it.
    """
    path = Path(path)
    if not path.exists():
        raise ParseError(f"dataset file not found: {path}")
    text = path.read_text()
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    if not lines or not lines[0].strip():
        raise ParseError(f"empty dataset file: {path}", row=0)
    reader = csv.reader(io.StringIO("\n".join(lines)))
    header = next(reader)
    if [h.strip() for h in header] != DATASET_COLUMNS:
        raise ParseError(f"dataset header must be exactly {','.join(DATASET_COLUMNS)}", row=0)
    rows = []
    for r, rec in enumerate(reader, start=1):
        if not rec:
            continue
        if len(rec) != len(DATASET_COLUMNS):
            raise ParseError(f"expected {len(DATASET_COLUMNS)} fields, got {len(rec)}", row=r)
        vals = []
        for c, cell in enumerate(rec):
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"not a number: {cell!r}", row=r, column=DATASET_COLUMNS[c]) from None
            if not np.isfinite(v):
                raise ParseError("non-finite value", row=r, column=DATASET_COLUMNS[c])
            vals.append(v)
        rows.append(vals)
    if not rows:
        raise ParseError(f"dataset has a header but no rows: {path}", row=1)
    A = np.array(rows)
    t = A[:, 0]
    dts = np.diff(t)
    if np.any(dts <= 0):
        bad = int(np.argmax(dts <= 0)) + 2
        raise ParseError("timestamps must be strictly increasing", row=bad, column="t")
    if expected_dt is not None and len(dts):
        off = np.abs(dts - expected_dt) > dt_tol * expected_dt
        if np.any(off):
            bad = int(np.argmax(off)) + 2
            raise ParseError(f"sample spacing deviates from {expected_dt} s", row=bad, column="t")
    T = len(t)
    y = np.empty((T, 18))
    d = np.empty((T, 6))
    for i in range(T):
        q = A[i, 7:11]
        if np.linalg.norm(q) < 1e-9:
            raise ParseError("zero quaternion", row=i + 1, column="qw")
        R = quat_to_rot(q)
        y[i] = np.concatenate([A[i, 1:4], A[i, 4:7], R.reshape(9), A[i, 11:14]])
        d[i, :3], d[i, 3:] = ground_truth_disturbance(A[i, 14:17], A[i, 17:20], R, A[i, 11:14], params)
    summary = {"rows": T, "dt_mean": float(dts.mean()) if len(dts) else float("nan"),
               "dt_min": float(dts.min()) if len(dts) else float("nan"),
               "dt_max": float(dts.max()) if len(dts) else float("nan"),
               "duration": float(t[-1] - t[0])}
    return FlightDataset(t, y, A[:, 20:24].copy(), A[:, 14:17].copy(), A[:, 17:20].copy(), d, summary)


def simulate_flight_data(scenario, seed=0, gains=None):
    """Fly ``scenario`` with a perfect-knowledge controller and record a dataset.

    Accelerations are taken from the continuous dynamics at each sample, so
    :func:`ground_truth_disturbance` reproduces the total force and torque
    exactly.  Returns ``(FlightDataset, TraceLog)``.
    """
    trace = run_closed_loop(scenario, TruthEstimator(), gains, seed)
    params = scenario.params
    T = len(trace)
    av = np.empty((T, 3))
    aw = np.empty((T, 3))
    d = np.empty((T, 6))
    y = np.empty((T, 18))
    for i in range(T):
        xd = continuous_dynamics(trace.x_true[i], trace.u[i], np.zeros(6), params)
        av[i], aw[i] = xd[V_SL], xd[W_SL]
        R = trace.x_true[i, R_SL].reshape(3, 3)
        d[i, :3], d[i, 3:] = ground_truth_disturbance(av[i], aw[i], R, trace.x_true[i, W_SL], params)
        y[i] = trace.x_true[i, MEAS_IDX]
    ds = FlightDataset(trace.t, y, trace.u.copy(), av, aw, d,
                       {"rows": T, "dt_mean": scenario.dt, "duration": float(trace.t[-1])})
    return ds, trace


def export_dataset(path, dataset, config_hash_value=""):
    y = dataset.y
    return write_flight_dataset(path, dataset.t, y[:, 0:3], y[:, 3:6], y[:, 6:15].reshape(-1, 3, 3),
                                y[:, 15:18], dataset.a_v, dataset.a_w, dataset.u, config_hash_value)

