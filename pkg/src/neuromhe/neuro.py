"""Two-hidden-layer ReLU network producing the MHE weighting vector.

::

    Theta = Ao relu(A2 relu(A1 y + b1) + b2) + bo

``Theta = [p, gamma1_bar, r, gamma2_bar, q]`` is mapped to weights by
``P = floor + p**2`` (same for R and Q) and ``gamma = sigmoid(gamma_bar)``.
"""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DomainError
from .weights import DEFAULT_FLOOR, WeightSpec

PARAM_NAMES = ("A1", "b1", "A2", "b2", "Ao", "bo")
CHECKPOINT_VERSION = 1


@dataclass
class MlpParams:
    A1: np.ndarray
    b1: np.ndarray
    A2: np.ndarray
    b2: np.ndarray
    Ao: np.ndarray
    bo: np.ndarray
    # optional input standardization, not trained
    y_mean: np.ndarray | None = None
    y_std: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        h1, n_in = self.A1.shape
        h2 = self.A2.shape[0]
        n_out = self.Ao.shape[0]
        if self.b1.shape != (h1,) or self.A2.shape != (h2, h1) or self.b2.shape != (h2,) \
                or self.Ao.shape != (n_out, h2) or self.bo.shape != (n_out,):
            raise ConfigError("inconsistent MLP parameter shapes")
        for name in PARAM_NAMES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ConfigError(f"non-finite entries in {name}")
        if (self.y_mean is None) != (self.y_std is None):
            raise ConfigError("y_mean and y_std must be given together")
        if self.y_std is not None and np.any(np.asarray(self.y_std) <= 0):
            raise ConfigError("input standard deviations must be positive")

    @property
    def n_in(self):
        return self.A1.shape[1]

    @property
    def n_out(self):
        return self.Ao.shape[0]

    @property
    def hidden(self):
        return (self.A1.shape[0], self.A2.shape[0])

    def arrays(self):
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def copy(self):
        return MlpParams(*(getattr(self, k).copy() for k in PARAM_NAMES),
                         y_mean=None if self.y_mean is None else self.y_mean.copy(),
                         y_std=None if self.y_std is None else self.y_std.copy(),
                         seed=self.seed)

    def with_arrays(self, arrays):
        return MlpParams(*(np.asarray(arrays[k], dtype=float) for k in PARAM_NAMES),
                         y_mean=self.y_mean, y_std=self.y_std, seed=self.seed)

    def flat(self):
        return np.concatenate([getattr(self, k).ravel() for k in PARAM_NAMES])

    def from_flat(self, vec):
        out, i = {}, 0
        for k in PARAM_NAMES:
            a = getattr(self, k)
            out[k] = np.asarray(vec[i:i + a.size], dtype=float).reshape(a.shape)
            i += a.size
        return self.with_arrays(out)


def init_mlp(n_in, n_out, hidden=(50, 50), seed=0, out_scale=1.0, bias_out=None,
             y_mean=None, y_std=None):
    """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` initialization.

    ``out_scale`` shrinks the output layer and ``bias_out`` sets ``bo`` (useful
    to start from a sensible weighting vector).
    """
    rng = np.random.default_rng(seed)
    h1, h2 = hidden

    def layer(fan_out, fan_in):
        lim = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-lim, lim, (fan_out, fan_in)), rng.uniform(-lim, lim, fan_out)

    A1, b1 = layer(h1, n_in)
    A2, b2 = layer(h2, h1)
    Ao, bo = layer(n_out, h2)
    Ao *= out_scale
    bo = bo * out_scale if bias_out is None else np.array(bias_out, dtype=float)
    return MlpParams(A1, b1, A2, b2, Ao, bo,
                     None if y_mean is None else np.asarray(y_mean, dtype=float),
                     None if y_std is None else np.asarray(y_std, dtype=float), seed)


INIT_RAW = 0.3
INIT_OUT_SCALE = 0.01


def init_weight_net(layout, n_in=18, hidden=(50, 50), seed=0, raw0=INIT_RAW,
                    out_scale=INIT_OUT_SCALE, y_mean=None, y_std=None):
    """Network whose initial output is close to the uniform vector ``raw0``.

    The output layer is shrunk by ``out_scale`` and its bias set to ``raw0``,
    so training starts from a nearly uniform weighting
    (``theta ~ floor + raw0**2``, ``gamma ~ sigmoid(raw0)``) with a small
    state-dependent part.
    """
    return init_mlp(n_in, layout.size, hidden, seed, out_scale, np.full(layout.size, raw0),
                    y_mean, y_std)


@dataclass
class MlpCache:
    """Forward-pass intermediates needed by :func:`mlp_backward`."""

    y: np.ndarray
    z1: np.ndarray
    h1: np.ndarray
    z2: np.ndarray
    h2: np.ndarray
    out: np.ndarray = field(repr=False)


def _input(params, y):
    y = np.asarray(y, dtype=float)
    if y.shape != (params.n_in,):
        raise DomainError(f"network input must have shape ({params.n_in},), got {y.shape}")
    if params.y_mean is not None:
        y = (y - params.y_mean) / params.y_std
    return y


def mlp_forward(params, y, return_cache=False):
    yi = _input(params, y)
    z1 = params.A1 @ yi + params.b1
    h1 = np.maximum(z1, 0.0)
    z2 = params.A2 @ h1 + params.b2
    h2 = np.maximum(z2, 0.0)
    out = params.Ao @ h2 + params.bo
    if return_cache:
        return out, MlpCache(yi, z1, h1, z2, h2, out)
    return out


def mlp_backward(params, cache, upstream):
    """Reverse-mode gradient of ``upstream . Theta`` over the six blocks."""
    g = np.asarray(upstream, dtype=float)
    grads = {"Ao": np.outer(g, cache.h2), "bo": g.copy()}
    d2 = (params.Ao.T @ g) * (cache.z2 > 0)
    grads["A2"] = np.outer(d2, cache.h1)
    grads["b2"] = d2
    d1 = (params.A2.T @ d2) * (cache.z1 > 0)
    grads["A1"] = np.outer(d1, cache.y)
    grads["b1"] = d1
    return grads


def map_to_weights(raw, layout, floor=DEFAULT_FLOOR):
    """Raw network output -> validated :class:`WeightSpec`."""
    if not floor > 0:
        raise ConfigError("positivity floor must be > 0")
    raw = np.asarray(raw, dtype=float)
    if raw.shape != (layout.size,):
        raise DomainError(f"raw output must have length {layout.size}")
    theta = floor + raw ** 2
    for i in layout.gamma_indices:
        theta[i] = expit(raw[i])
    # keep gammas inside the open interval for extreme inputs
    for i in layout.gamma_indices:
        theta[i] = min(max(theta[i], np.finfo(float).tiny), 1.0 - np.finfo(float).epsneg)
    return WeightSpec.from_theta(theta, layout, floor)


def weights_jacobian(raw, layout):
    """Diagonal of ``d theta / d Theta`` (the Jacobian is diagonal)."""
    raw = np.asarray(raw, dtype=float)
    d = 2.0 * raw
    for i in layout.gamma_indices:
        s = expit(raw[i])
        d[i] = s * (1.0 - s)
    return d


def save_checkpoint(path, params, extra=None):
    """Write parameters to ``.npz`` (little-endian float64, versioned)."""
    data = {k: np.asarray(getattr(params, k), dtype="<f8") for k in PARAM_NAMES}
    data["version"] = np.array(CHECKPOINT_VERSION, dtype="<i8")
    data["seed"] = np.array(-1 if params.seed is None else params.seed, dtype="<i8")
    data["dims"] = np.array([params.n_in, *params.hidden, params.n_out], dtype="<i8")
    if params.y_mean is not None:
        data["y_mean"] = np.asarray(params.y_mean, dtype="<f8")
        data["y_std"] = np.asarray(params.y_std, dtype="<f8")
    for k, v in (extra or {}).items():
        data[f"extra_{k}"] = np.asarray(v)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **data)
    return path


def load_checkpoint(path, return_extra=False):
    with np.load(path, allow_pickle=False) as z:
        if "version" not in z or int(z["version"]) != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version in {path}")
        seed = int(z["seed"])
        params = MlpParams(*(z[k].astype(float) for k in PARAM_NAMES),
                           y_mean=z["y_mean"].astype(float) if "y_mean" in z else None,
                           y_std=z["y_std"].astype(float) if "y_std" in z else None,
                           seed=None if seed < 0 else seed)
        dims = tuple(int(v) for v in z["dims"])
        extra = {k[6:]: z[k] for k in z.files if k.startswith("extra_")}
    if dims != (params.n_in, *params.hidden, params.n_out):
        raise ConfigError("checkpoint dims record does not match the stored arrays")
    return (params, extra) if return_extra else params
