"""Losses, gradient assembly, Adam and the training loops.

Two learners share the same machinery:

* NeuroMHE: a network maps each new measurement to the weighting vector;
  its parameters are updated online with the chain rule
  ``dL/dw = sum_k dL/dx_k X_k (dtheta/dTheta) dTheta/dw``.
* DMHE: one raw vector ``Theta`` (no network) mapped to the weights the same
  way, i.e. a fixed weighting tuned by gradient descent.
"""
import csv
from dataclasses import dataclass, field

import numpy as np

from .dynamics import DIST_IDX, P_SL, V_SL, QuadrotorModel
from .errors import ConfigError
from .estimator import MheEstimator
from .neuro import map_to_weights, mlp_backward, save_checkpoint, weights_jacobian
from .sim import run_closed_loop
from .weights import DEFAULT_FLOOR, WeightLayout

# --------------------------------------------------------------------------
# losses


@dataclass
class LossSpec:
    """Weighted squared error on selected state components.

    ``kind`` is ``tracking`` (default components: position and velocity)
    or ``estimation`` (default components: the six disturbance states).
    Tracking losses may only penalize position and velocity slots.
    """

    kind: str = "tracking"
    alpha: float = 1.0
    W_e: np.ndarray | None = None
    index: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("tracking", "estimation"):
            raise ConfigError(f"unknown loss kind {self.kind!r}")
        if self.index is None:
            self.index = np.arange(6) if self.kind == "tracking" else DIST_IDX.copy()
        self.index = np.asarray(self.index, dtype=int)
        if self.kind == "tracking" and not np.all((self.index >= 0) & (self.index < 6)):
            raise ConfigError("tracking loss components must be position/velocity slots 0..5")
        if self.W_e is None:
            self.W_e = np.ones(len(self.index))
        self.W_e = np.asarray(self.W_e, dtype=float)
        if not self.alpha > 0:
            raise ConfigError("loss scale alpha must be positive")
        if self.W_e.shape != self.index.shape or np.any(self.W_e <= 0):
            raise ConfigError("W_e must be positive with one entry per penalized component")


def _weighted_loss(xs, target, spec):
    xs = np.asarray(xs, dtype=float)
    target = np.asarray(target, dtype=float)
    if target.shape != (len(xs), len(spec.index)):
        raise ConfigError(f"target must have shape {(len(xs), len(spec.index))}, got {target.shape}")
    e = xs[:, spec.index] - target
    val = spec.alpha * float(np.sum(spec.W_e * e ** 2))
    grad = np.zeros_like(xs)
    grad[:, spec.index] = 2.0 * spec.alpha * spec.W_e * e
    return val, grad


def tracking_loss(solution, reference, spec=None):
    """``alpha sum_k |x_k^q - ref_k|^2_We`` over the window and its gradient."""
    spec = spec or LossSpec("tracking")
    return _weighted_loss(solution.xs, reference, spec)


def estimation_loss(solution, truth_d, spec=None):
    """Weighted squared disturbance-estimation error over the window."""
    spec = spec or LossSpec("estimation")
    return _weighted_loss(solution.xs, truth_d, spec)


def assemble_gradient(dL_dx, traj, theta_jac=None, net=None, cache=None):
    """Chain rule from the state gradients to the learnable parameters.

    Returns ``dL/dtheta`` when ``theta_jac`` is None (DMHE stops here),
    ``dL/dTheta`` when only ``theta_jac`` is given and the network gradient
    dict when ``net`` and ``cache`` are given too.
    """
    dL_dx = np.asarray(dL_dx, dtype=float)
    if dL_dx.shape != traj.Xs.shape[:2]:
        raise ConfigError(f"dL/dx shape {dL_dx.shape} does not match the trajectory {traj.Xs.shape[:2]}")
    g_theta = np.einsum("ki,kij->j", dL_dx, traj.Xs)
    if theta_jac is None:
        return g_theta
    g_raw = g_theta * theta_jac
    if net is None:
        return g_raw
    return mlp_backward(net, cache, g_raw)


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(state, params, grads):
    """One bias-corrected Adam step on a dict of arrays; returns new arrays."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=float)
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m = np.zeros_like(p, dtype=float)
            v = np.zeros_like(p, dtype=float)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        out[k] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


# --------------------------------------------------------------------------
# learners


class NeuroLearner:
    """Online update of the network from a window loss."""

    name = "neuromhe"

    def __init__(self, net, lr=1e-3):
        self.net = net
        self.adam = AdamState(lr=lr)

    def make_estimator(self, horizon, model, options=None, floor=DEFAULT_FLOOR, gradients=True):
        return MheEstimator(horizon, net=self.net, model=model, gradients=gradients,
                            options=options, floor=floor)

    def update(self, est, dL_dx):
        grads = assemble_gradient(dL_dx, est.grad, est.theta_jacobian(), self.net, est.cache)
        new = adam_update(self.adam, self.net.arrays(), grads)
        self.net = self.net.with_arrays(new)
        est.net = self.net
        return grads


class DmheLearner:
    """Fixed weighting vector ``theta = map(Theta)`` tuned by gradient descent."""

    name = "dmhe"

    def __init__(self, raw, lr=1e-3):
        self.raw = np.asarray(raw, dtype=float).copy()
        self.adam = AdamState(lr=lr)
        self.layout = None
        self.floor = DEFAULT_FLOOR

    def weights(self):
        return map_to_weights(self.raw, self.layout, self.floor)

    def make_estimator(self, horizon, model, options=None, floor=DEFAULT_FLOOR, gradients=True):
        self.layout = WeightLayout.for_model(model)
        self.floor = floor
        return MheEstimator(horizon, weights=self.weights(), model=model, gradients=gradients,
                            options=options, floor=floor)

    def update(self, est, dL_dx):
        g_theta = assemble_gradient(dL_dx, est.grad)
        g_raw = g_theta * weights_jacobian(self.raw, self.layout)
        self.raw = adam_update(self.adam, {"raw": self.raw}, {"raw": g_raw})["raw"]
        est.fixed = self.weights()
        return g_raw


# --------------------------------------------------------------------------
# episode loop


@dataclass
class TrainConfig:
    horizon: int = 10
    lr: float = 1e-3
    loss: LossSpec = field(default_factory=LossSpec)
    floor: float = DEFAULT_FLOOR
    per_step: bool = True
    conv_rel: float = 1e-3
    conv_episodes: int = 3
    update_start: int = 0
    vary_seed: bool = False

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")


@dataclass
class EpisodeResult:
    trace: object
    mean_loss: float
    skipped: int
    updates: int


def _window_times(t_index, n):
    return np.arange(t_index - n, t_index + 1)


def run_episode_rl(scenario, learner, cfg=None, seed=0, learn=True, gains=None, model=None):
    """One closed-loop episode with (optionally) per-step policy-gradient updates.

    At every step the window loss compares the MHE state estimates with the
    reference at the same absolute times.  Steps whose MHE solve did not
    converge, or whose sensitivity recursion failed, are skipped.
    """
    cfg = cfg or TrainConfig()
    model = model or QuadrotorModel(scenario.params)
    est = learner.make_estimator(cfg.horizon, model, floor=cfg.floor, gradients=learn)
    acc = {"g": None, "count": 0}
    stats = {"skipped": 0, "updates": 0}
    refs = {}

    def ref_at(i):
        if i not in refs:
            r = scenario.reference(i * scenario.dt)
            full = np.zeros(model.nx)
            full[P_SL], full[V_SL] = r.p, r.v
            refs[i] = full[cfg.loss.index]
        return refs[i]

    def hook(k, t, xh):
        sol = est.solution
        n = sol.horizon
        target = np.array([ref_at(i) for i in _window_times(k, n)])
        if cfg.loss.kind != "tracking":
            raise ConfigError("closed-loop training uses the tracking loss")
        L, dL = tracking_loss(sol, target, cfg.loss)
        skipped = False
        if learn and k >= cfg.update_start:
            if est.grad is None or not sol.converged:
                skipped = True
                stats["skipped"] += 1
            elif cfg.per_step:
                learner.update(est, dL)
                stats["updates"] += 1
        return L, sol.kkt_residual, skipped

    trace = run_closed_loop(scenario, est, gains, seed, step_hook=hook)
    mean_loss = float(np.nanmean(trace.loss)) if len(trace) else float("nan")
    return EpisodeResult(trace, mean_loss, stats["skipped"], stats["updates"])


def has_converged(history, rel=1e-3, episodes=3):
    """Relative change of ``L_mean`` below ``rel`` over the last ``episodes``."""
    if len(history) <= episodes:
        return False
    tail = np.asarray(history[-episodes - 1:], dtype=float)
    return bool(np.all(np.abs(np.diff(tail)) <= rel * np.abs(tail[:-1])))


def train_rl(scenario, learner, episodes, cfg=None, seed=0, metrics_path=None,
             config_hash_value="", stop_on_convergence=False, log=None):
    """Repeat :func:`run_episode_rl`; returns the list of ``L_mean`` values.

    Every episode replays the disturbance realization of ``seed`` unless
    ``cfg.vary_seed`` is set, in which case episode ``e`` uses ``seed + e``.
    """
    cfg = cfg or TrainConfig()
    history = []
    rows = []
    for e in range(episodes):
        res = run_episode_rl(scenario, learner, cfg, seed=seed + e if cfg.vary_seed else seed)
        history.append(res.mean_loss)
        rows.append((e, len(res.trace), res.mean_loss, float(np.nanmax(res.trace.kkt)),
                     res.skipped, res.updates, int(res.trace.aborted)))
        if log:
            log(f"episode {e}: L_mean={res.mean_loss:.6g} skipped={res.skipped}")
        if stop_on_convergence and has_converged(history, cfg.conv_rel, cfg.conv_episodes):
            break
    if metrics_path is not None:
        write_metrics(metrics_path, rows, config_hash_value)
    return history


METRIC_COLUMNS = ("episode", "steps", "L_mean", "kkt_max", "skipped", "updates", "aborted")


def write_metrics(path, rows, config_hash_value=""):
    with open(path, "w", newline="") as fh:
        fh.write(f"# config-hash: {config_hash_value}\n")
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow(r)


# --------------------------------------------------------------------------
# supervised training on recorded data


def run_dataset(dataset, est, truth=None, spec=None, learner=None, with_control=False):
    """Run the estimator through a recorded flight.

    The dataset model uses ``u = 0`` unless ``with_control``: the estimated
    force then is the total (thrust included) force in the world frame, which
    is what :func:`ground_truth_disturbance` measures.  Returns the estimate
    history ``(T, 24)`` and the per-step window loss.
    """
    T = len(dataset)
    est.reset(dataset.y[0], float(np.median(np.diff(dataset.t))) if T > 1 else 1.0)
    xh = np.zeros((T, 24))
    losses = np.full(T, np.nan)
    for k in range(T):
        u_prev = dataset.u[k - 1] if (with_control and k) else np.zeros(4)
        xh[k] = est.update(k, dataset.y[k], u_prev)
        if truth is not None:
            sol = est.solution
            n = sol.horizon
            L, dL = estimation_loss(sol, truth[k - n:k + 1], spec)
            losses[k] = L
            if learner is not None and est.grad is not None and sol.converged:
                learner.update(est, dL)
    return xh, losses


def train_supervised(dataset, net, epochs=5, cfg=None, checkpoint_path=None, log=None,
                     with_control=False, model=None):
    """Sliding-window supervised training against ground-truth disturbances.

    Without ``with_control`` the target is the total force and torque; with
    it the recorded control enters the model and the target excludes it.
    Returns ``(net, per-epoch mean loss list)``.
    """
    cfg = cfg or TrainConfig(loss=LossSpec("estimation"))
    if cfg.loss.kind != "estimation":
        raise ConfigError("supervised training uses the estimation loss")
    model = model or QuadrotorModel()
    truth = dataset.d_external if with_control else dataset.d_world
    learner = NeuroLearner(net, cfg.lr)
    trace = []
    for ep in range(epochs):
        est = learner.make_estimator(cfg.horizon, model, floor=cfg.floor)
        _, losses = run_dataset(dataset, est, truth, cfg.loss, learner, with_control)
        trace.append(float(np.nanmean(losses)))
        if log:
            log(f"epoch {ep}: mean loss {trace[-1]:.6g}")
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, learner.net, {"epoch": ep, "loss": trace[-1]})
    return learner.net, trace


def evaluate_dataset(dataset, net=None, weights=None, horizon=10, floor=DEFAULT_FLOOR,
                     with_control=False, model=None):
    """Estimates on a recorded flight without learning."""
    model = model or QuadrotorModel()
    est = MheEstimator(horizon, weights=weights, net=net, model=model, floor=floor)
    xh, _ = run_dataset(dataset, est, with_control=with_control)
    return xh



# --------------------------------------------------------------------------
# fixed-weight (DMHE) parameter files

DMHE_VERSION = 1


def save_dmhe(path, raw, extra=None):
    """Store a raw DMHE vector as ``.npz``."""
    data = {"raw": np.asarray(raw, dtype="<f8"), "version": np.array(DMHE_VERSION, dtype="<i8"),
            "kind": np.array("dmhe")}
    for k, v in (extra or {}).items():
        data[f"extra_{k}"] = np.asarray(v)
    with open(path, "wb") as fh:
        np.savez(fh, **data)
    return path


def load_dmhe(path):
    with np.load(path, allow_pickle=False) as z:
        if "kind" not in z or str(z["kind"]) != "dmhe" or int(z["version"]) != DMHE_VERSION:
            raise ConfigError(f"{path} is not a DMHE parameter file")
        return z["raw"].astype(float)
