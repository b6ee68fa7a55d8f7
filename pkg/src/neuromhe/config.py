"""Run configuration: INI files with a fixed schema.

Every key has a type and a default; unknown sections or keys are rejected
so typos fail loudly.  Vectors are comma-separated numbers.  Files named on
the command line are looked up as given, then in ``$NEUROMHE_CONFIG_DIR``.
"""
import configparser
import os
from pathlib import Path

import numpy as np

from .errors import ConfigError

ENV_CONFIG_DIR = "NEUROMHE_CONFIG_DIR"


def _vec(n=None):
    def parse(text):
        try:
            arr = np.array([float(v) for v in str(text).replace(";", ",").split(",") if v.strip()])
        except ValueError:
            raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None
        if n is not None and arr.shape != (n,):
            raise ConfigError(f"expected {n} numbers, got {len(arr)}")
        return arr
    parse.__name__ = f"vec{n or ''}"
    return parse


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


SCHEMA = {
    "run": {
        "seed": (int, 0),
        "scenario": (str, "fig8"),
        "mode": (str, "rl"),
        "episodes": (int, 10),
        "duration": (float, 10.0),
        "dt": (float, 0.01),
        "horizon": (int, 10),
        "eval_episodes": (int, 20),
        "jobs": (int, 1),
    },
    "solver": {
        "tol": (float, 1e-8),
        "max_iter": (int, 50),
        "mu0": (float, 1e-8),
        "mu_max": (float, 1e12),
        "hessian": (str, "auto"),
        "scale_tol": (_bool, True),
        "barrier_delta": (_vec(), np.array([1e-2, 1e-4, 1e-6])),
    },
    "train": {
        "lr": (float, 1e-4),
        "alpha": (float, 1.0),
        "W_e": (_vec(6), np.ones(6)),
        "floor": (float, 1e-4),
        "hidden": (_vec(2), np.array([50.0, 50.0])),
        "net_seed": (int, 0),
        "per_step": (_bool, True),
        "conv_rel": (float, 1e-3),
        "conv_episodes": (int, 3),
        "epochs": (int, 5),
        "init_raw": (float, 0.3),
        "init_out_scale": (float, 0.01),
        "vary_seed": (_bool, False),
    },
    "sim": {
        "noise_std": (float, 1e-3),
        "c_v": (_vec(3), np.array([0.5, 0.5, 1.5])),
        "c_p": (_vec(3), np.array([0.2, 0.2, 0.6])),
        "c_f": (_vec(3), np.array([0.5, 0.5, 1.5])),
        "c_w": (_vec(3), np.array([0.01, 0.01, 0.03])),
        "c_e": (_vec(3), np.array([0.01, 0.01, 0.03])),
        "c_tau": (_vec(3), np.array([0.01, 0.01, 0.03])),
        "clip": (_bool, True),
        "event_time": (float, 3.0),
        "step_force": (float, 2.0),
        "pulse_force": (float, 7.0),
        "pulse_width": (float, 1.0),
        "mass": (float, 0.752),
        "gravity": (float, 9.81),
    },
    "controller": {
        "kp": (_vec(3), np.array([16.0, 16.0, 16.0])),
        "kv": (_vec(3), np.array([8.0, 8.0, 8.0])),
        "kR": (_vec(3), np.array([1.5, 1.5, 1.0])),
        "kw": (_vec(3), np.array([0.1, 0.1, 0.12])),
        "f_max": (float, 2.5),
        "tau_max": (float, 0.5),
    },
    "bench": {
        "horizons": (_vec(), np.array([10, 20, 40, 60, 80, 100.0])),
        "reps": (int, 100),
        "dense_reps": (int, 3),
    },
    "gradcheck": {
        "instances": (int, 100),
        "fd_step": (float, 1e-5),
        "corrupt": (_bool, False),
    },
}


class RunConfig:
    """Validated configuration, accessed as ``cfg.section.key``."""

    def __init__(self, values, source=None):
        self._values = values
        self.source = source

    def __getattr__(self, name):
        try:
            return _Section(self._values[name])
        except KeyError:
            raise AttributeError(name) from None

    def get(self, section, key):
        return self._values[section][key]

    def set(self, section, key, value):
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        typ = SCHEMA[section][key][0]
        self._values[section][key] = typ(value) if not isinstance(value, np.ndarray) else value
        validate(self)

    def as_dict(self):
        out = {}
        for sec, kv in self._values.items():
            out[sec] = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in kv.items()}
        return out


class _Section:
    def __init__(self, d):
        self.__dict__.update(d)


def defaults():
    return RunConfig({s: {k: (d.copy() if isinstance(d, np.ndarray) else d)
                          for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})


def resolve_path(path):
    p = Path(path)
    if p.exists():
        return p
    base = os.environ.get(ENV_CONFIG_DIR)
    if base and not p.is_absolute() and (Path(base) / p).exists():
        return Path(base) / p
    raise ConfigError(f"config file not found: {path}")


def parse_config(text, source=None):
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = defaults()
    cfg.source = source
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown config section [{sec}]")
        for key, raw in cp.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown config key {sec}.{key}")
            typ = SCHEMA[sec][key][0]
            try:
                cfg._values[sec][key] = typ(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {sec}.{key}: {raw!r} ({exc})") from None
    validate(cfg)
    return cfg


def load_config(path=None):
    if path is None:
        return defaults()
    p = resolve_path(path)
    return parse_config(p.read_text(), str(p))


def validate(cfg):
    r, s, t = cfg.run, cfg.solver, cfg.train
    if r.horizon < 1:
        raise ConfigError("run.horizon must be >= 1")
    if not r.dt > 0 or not r.duration > 0:
        raise ConfigError("run.dt and run.duration must be positive")
    if r.episodes < 1 or r.eval_episodes < 1:
        raise ConfigError("episode counts must be >= 1")
    if r.mode not in ("rl", "supervised", "dmhe"):
        raise ConfigError(f"run.mode must be rl, supervised or dmhe, got {r.mode!r}")
    if not s.tol > 0 or s.max_iter < 1:
        raise ConfigError("solver.tol and solver.max_iter must be positive")
    if s.hessian not in ("gauss-newton", "exact", "auto"):
        raise ConfigError("solver.hessian must be gauss-newton, exact or auto")
    if np.any(np.asarray(s.barrier_delta) <= 0):
        raise ConfigError("barrier parameters must be positive")
    if not t.lr > 0 or not t.alpha > 0 or not t.floor > 0:
        raise ConfigError("train.lr, train.alpha and train.floor must be positive")
    if np.any(np.asarray(t.W_e) <= 0):
        raise ConfigError("train.W_e must be positive")
    if np.any(np.asarray(t.hidden) < 1):
        raise ConfigError("train.hidden sizes must be >= 1")
    if cfg.sim.noise_std < 0:
        raise ConfigError("sim.noise_std must be non-negative")
    for k in ("c_v", "c_p", "c_f", "c_w", "c_e", "c_tau"):
        if np.any(getattr(cfg.sim, k) < 0):
            raise ConfigError(f"sim.{k} must be non-negative")
    if np.any(np.asarray(cfg.bench.horizons) < 1) or cfg.bench.reps < 1:
        raise ConfigError("bench horizons and reps must be positive")
    return cfg


def dump_config(cfg):
    """INI text of a configuration (round-trips through :func:`parse_config`)."""
    lines = []
    for sec, kv in cfg._values.items():
        lines.append(f"[{sec}]")
        for k, v in kv.items():
            if isinstance(v, np.ndarray):
                v = ", ".join(repr(float(a)) for a in v)
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
