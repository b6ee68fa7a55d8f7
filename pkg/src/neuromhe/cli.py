"""Command-line entry point.

Subcommands: ``train``, ``evaluate``, ``gradcheck``, ``bench-grad``,
``simulate`` and ``export-plots-data``.  Settings come from an optional INI
file (``--config``); command-line flags take precedence.  Exit codes: 0
success, 1 runtime failure, 2 usage or configuration error.
"""
import argparse
import csv
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .checks import linear_fit_r2, run_bench, run_gradcheck
from .config import load_config
from .dynamics import DIST_IDX, QuadrotorModel, VehicleParams
from .errors import (ConfigError, DomainError, GradientFailure, NonConvergenceError,
                     NumericalError, ParseError)
from .estimator import MheEstimator
from .mhe import SolverOptions
from .neuro import init_weight_net, load_checkpoint, map_to_weights, save_checkpoint
from .sim import (SCENARIOS, ControllerGains, DisturbanceModel, TruthEstimator, ZeroEstimator,
                  config_hash, disturbance_rmse, export_dataset, load_flight_dataset,
                  make_scenario, run_closed_loop, simulate_flight_data, tracking_rmse)
from .train import (DmheLearner, LossSpec, NeuroLearner, TrainConfig, evaluate_dataset, load_dmhe,
                    save_dmhe, train_rl, train_supervised)
from .weights import WeightLayout

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
D_KEYS = ("d_fxy", "d_fz", "d_f", "d_txy", "d_tz", "d_t")
P_KEYS = ("p", "px", "py", "pz")
D_COLS = ("dfx", "dfy", "dfz", "dtx", "dty", "dtz")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# configuration plumbing

_OVERRIDES = {
    "seed": ("run", "seed"), "scenario": ("run", "scenario"), "mode": ("run", "mode"),
    "episodes": ("run", "episodes"), "duration": ("run", "duration"), "dt": ("run", "dt"),
    "horizon": ("run", "horizon"), "eval_episodes": ("run", "eval_episodes"),
    "jobs": ("run", "jobs"), "lr": ("train", "lr"), "epochs": ("train", "epochs"),
    "instances": ("gradcheck", "instances"), "reps": ("bench", "reps"),
}


def build_config(args):
    """Config file plus command-line overrides."""
    cfg = load_config(getattr(args, "config", None))
    for attr, (sec, key) in _OVERRIDES.items():
        val = getattr(args, attr, None)
        if val is not None:
            cfg.set(sec, key, val)
    if cfg.run.scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {cfg.run.scenario!r} "
                          f"(choose from {', '.join(SCENARIOS)})")
    return cfg


def _hash(cfg, command):
    return config_hash({"command": command, "config": cfg.as_dict(), "version": __version__})


def _params(cfg):
    return VehicleParams(m=cfg.sim.mass, g=cfg.sim.gravity)


def _scenario(cfg, dt=None):
    s = cfg.sim
    dist = DisturbanceModel(s.c_v, s.c_p, s.c_f, s.c_w, s.c_e, s.c_tau, s.clip)
    return make_scenario(cfg.run.scenario, cfg.run.duration, dt or cfg.run.dt,
                         disturbance=dist, noise_std=s.noise_std, event_time=s.event_time,
                         step_force=s.step_force, pulse_force=s.pulse_force,
                         pulse_width=s.pulse_width, params=_params(cfg))


def _gains(cfg):
    c = cfg.controller
    return ControllerGains(c.kp, c.kv, c.kR, c.kw, c.f_max, c.tau_max)


def _solver(cfg):
    s = cfg.solver
    return SolverOptions(tol=s.tol, max_iter=s.max_iter, mu0=s.mu0, mu_max=s.mu_max,
                         hessian=s.hessian, scale_tol=s.scale_tol, raise_on_failure=False)


def _train_cfg(cfg, kind):
    t = cfg.train
    return TrainConfig(horizon=cfg.run.horizon, lr=t.lr, floor=t.floor, per_step=t.per_step,
                       conv_rel=t.conv_rel, conv_episodes=t.conv_episodes, vary_seed=t.vary_seed,
                       loss=LossSpec(kind, alpha=t.alpha, W_e=t.W_e))


def _layout():
    return WeightLayout.for_model(QuadrotorModel())


def _new_net(cfg):
    t = cfg.train
    return init_weight_net(_layout(), hidden=tuple(int(h) for h in t.hidden), seed=t.net_seed,
                           raw0=t.init_raw, out_scale=t.init_out_scale)


def load_network(path):
    """Checkpoint loader that insists on the quadrotor input/output sizes."""
    try:
        net = load_checkpoint(path)
    except (KeyError, OSError, ValueError) as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from None
    size = _layout().size
    if net.n_in != 18 or net.n_out != size:
        raise ConfigError(f"incompatible checkpoint dims: network maps {net.n_in} -> {net.n_out}, "
                          f"expected 18 -> {size}")
    return net


def _load_raw(path):
    try:
        raw = load_dmhe(path)
    except (KeyError, OSError, ValueError) as exc:
        raise ConfigError(f"cannot read DMHE file {path}: {exc}") from None
    if raw.shape != (_layout().size,):
        raise ConfigError(f"incompatible DMHE vector of length {raw.size}")
    return raw


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_table(path, header, rows, chash):
    with open(path, "w", newline="") as fh:
        fh.write(f"# config-hash: {chash}\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _fmt(v):
    return repr(float(v))


# --------------------------------------------------------------------------
# estimator selection

def estimator_factory(spec, cfg):
    """``(label, make)`` for the estimator named by ``spec``.

    ``spec`` has ``checkpoint``, ``dmhe`` and ``baseline`` entries (at most
    one set); with none set the untrained network is used.
    """
    opts = _solver(cfg)
    model = QuadrotorModel(_params(cfg))
    N, floor = cfg.run.horizon, cfg.train.floor
    if spec.get("checkpoint"):
        net = load_network(spec["checkpoint"])
        return "neuromhe", lambda: MheEstimator(N, net=net, model=model, options=opts, floor=floor)
    if spec.get("dmhe"):
        w8 = map_to_weights(_load_raw(spec["dmhe"]), _layout(), floor)
        return "dmhe", lambda: MheEstimator(N, weights=w8, model=model, options=opts, floor=floor)
    if spec.get("baseline") == "truth":
        return "truth", TruthEstimator
    if spec.get("baseline") == "zero":
        return "zero", ZeroEstimator
    net = _new_net(cfg)
    return "untrained", lambda: MheEstimator(N, net=net, model=model, options=opts, floor=floor)


def _spec(args):
    return {k: getattr(args, k, None) for k in ("checkpoint", "dmhe", "baseline")}


def _cfg_from_dict(d):
    cfg = load_config(None)
    for sec, kv in d.items():
        for k, v in kv.items():
            cfg.set(sec, k, np.asarray(v, dtype=float) if isinstance(v, list) else v)
    return cfg


def _episode(job):
    cfg_dict, spec, seed = job
    cfg = _cfg_from_dict(cfg_dict)
    _, make = estimator_factory(spec, cfg)
    tr = run_closed_loop(_scenario(cfg), make(), _gains(cfg), seed)
    row = {"seed": seed, **tracking_rmse(tr), **disturbance_rmse(tr.d_hat, tr.d_true),
           "aborted": int(tr.aborted)}
    return row, tr


def eval_seeds(cfg, n=None):
    """Evaluation seeds, offset from the training seed."""
    return [cfg.run.seed + 10000 + i for i in range(n or cfg.run.eval_episodes)]


def evaluate_episodes(spec, cfg, seeds=None):
    """Closed-loop RMSEs for every seed; returns ``[(row, trace), ...]``."""
    jobs = [(cfg.as_dict(), spec, s) for s in (seeds or eval_seeds(cfg))]
    if cfg.run.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.run.jobs) as ex:
            return list(ex.map(_episode, jobs))
    return [_episode(j) for j in jobs]


# --------------------------------------------------------------------------
# commands

def cmd_train(args, cfg):
    chash = _hash(cfg, "train")
    out = _out_dir(args)
    mode = cfg.run.mode
    log = None if args.quiet else print
    if mode == "supervised":
        if args.data is None:
            raise ConfigError("supervised training needs --data")
        ds = load_flight_dataset(args.data, expected_dt=args.expected_dt)
        _, trace = train_supervised(ds, _new_net(cfg), cfg.train.epochs,
                                    _train_cfg(cfg, "estimation"), out / "checkpoint.npz", log,
                                    with_control=args.with_control,
                                    model=QuadrotorModel(_params(cfg)))
        write_table(out / "metrics.csv", ("epoch", "L_mean"),
                    [(i, _fmt(v)) for i, v in enumerate(trace)], chash)
        print(f"final L_mean={trace[-1]:.6g}")
        return EXIT_OK
    if args.data is not None:
        raise ConfigError("--data is only used with --mode supervised")
    tc = _train_cfg(cfg, "tracking")
    if mode == "rl":
        learner = NeuroLearner(_new_net(cfg), tc.lr)
    else:
        learner = DmheLearner(np.full(_layout().size, cfg.train.init_raw), tc.lr)
    hist = train_rl(_scenario(cfg), learner, cfg.run.episodes, tc, cfg.run.seed,
                    out / "metrics.csv", chash, log=log)
    if mode == "rl":
        save_checkpoint(out / "checkpoint.npz", learner.net, {"config_hash": chash})
    else:
        save_dmhe(out / "dmhe.npz", learner.raw, {"config_hash": chash})
    print(f"final L_mean={hist[-1]:.6g}")
    return EXIT_OK


def _evaluate_data(args, cfg, label, make, out, chash):
    ds = load_flight_dataset(args.data, expected_dt=args.expected_dt)
    est = make()
    if not isinstance(est, MheEstimator):
        raise ConfigError("dataset evaluation needs --checkpoint, --dmhe or the untrained network")
    xh = evaluate_dataset(ds, net=est.net, weights=est.fixed, horizon=cfg.run.horizon,
                          floor=cfg.train.floor, with_control=args.with_control, model=est.model)
    d_hat = xh[:, DIST_IDX]
    d_true = ds.d_external if args.with_control else ds.d_world
    res = disturbance_rmse(d_hat, d_true)
    write_table(out / "eval.csv", ("estimator",) + tuple(f"rmse_{k}" for k in D_KEYS),
                [(label,) + tuple(_fmt(res[k]) for k in D_KEYS)], chash)
    write_table(out / "trace.csv",
                ("t",) + tuple(f"{c}_true" for c in D_COLS) + tuple(f"{c}_hat" for c in D_COLS),
                [[_fmt(ds.t[i])] + [_fmt(v) for v in np.concatenate([d_true[i], d_hat[i]])]
                 for i in range(len(ds))], chash)
    for k in D_KEYS:
        print(f"{label} {k:6s} RMSE {res[k]:.6g}")
    return EXIT_OK


def cmd_evaluate(args, cfg):
    chash = _hash(cfg, "evaluate")
    out = _out_dir(args)
    spec = _spec(args)
    label, make = estimator_factory(spec, cfg)
    if args.data is not None:
        return _evaluate_data(args, cfg, label, make, out, chash)
    results = evaluate_episodes(spec, cfg)
    keys = P_KEYS + D_KEYS
    write_table(out / "eval.csv",
                ("estimator", "seed") + tuple(f"rmse_{k}" for k in keys) + ("aborted",),
                [(label, r["seed"]) + tuple(_fmt(r[k]) for k in keys) + (r["aborted"],)
                 for r, _ in results], chash)
    results[0][1].to_csv(out / "trace.csv", chash)
    print(f"{label}: {len(results)} episodes")
    for k in keys:
        vals = [r[k] for r, _ in results]
        print(f"  {k:6s} RMSE median {np.median(vals):.6g}  mean {np.mean(vals):.6g}")
    return EXIT_FAIL if any(r["aborted"] for r, _ in results) else EXIT_OK


def cmd_gradcheck(args, cfg):
    g = cfg.gradcheck
    ok = run_gradcheck(g.instances, cfg.run.seed, g.corrupt or args.corrupt, g.fd_step)
    print("gradcheck:", "PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_bench_grad(args, cfg):
    chash = _hash(cfg, "bench-grad")
    out = _out_dir(args)
    rows = run_bench([int(h) for h in cfg.bench.horizons], cfg.bench.reps, cfg.bench.dense_reps,
                     cfg.run.seed)
    write_table(out / "bench_grad.csv", ("method", "N", "min_s"),
                [(m, n, _fmt(t)) for m, n, t in rows], chash)
    for method in ("kf", "dense"):
        ns = [n for m, n, _ in rows if m == method]
        ts = [t for m, _, t in rows if m == method]
        print(f"{method:5s} " + "  ".join(f"N={n}:{t * 1e3:.3g}ms" for n, t in zip(ns, ts)))
        print(f"{method:5s} linear fit R^2={linear_fit_r2(ns, ts):.4f}  "
              f"t(N={ns[-1]})/t(N={ns[0]})={ts[-1] / ts[0]:.3g}")
    return EXIT_OK


def cmd_simulate(args, cfg):
    chash = _hash(cfg, "simulate")
    out = _out_dir(args)
    if args.dataset:
        ds, _ = simulate_flight_data(_scenario(cfg, dt=args.dataset_dt), cfg.run.seed, _gains(cfg))
        path = export_dataset(out / "flight.csv", ds, chash)
        print(f"dataset: {path} ({len(ds)} rows)")
        return EXIT_OK
    label, make = estimator_factory(_spec(args), cfg)
    tr = run_closed_loop(_scenario(cfg), make(), _gains(cfg), cfg.run.seed)
    tr.to_csv(out / "trace.csv", chash)
    rm = tracking_rmse(tr)
    print(f"{label}: tracking RMSE p={rm['p']:.4g} pz={rm['pz']:.4g} digest {tr.digest()[:16]}")
    if tr.aborted:
        print(tr.message, file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_export_plots_data(args, cfg):
    """Long-format per-episode metrics for every estimator, plus one trace each."""
    chash = _hash(cfg, "export-plots-data")
    out = _out_dir(args)
    specs = [{"checkpoint": p} for p in args.checkpoint or []]
    specs += [{"dmhe": p} for p in args.dmhe or []]
    specs += [{"baseline": b} for b in args.baseline or (["zero"] if not specs else [])]
    rows = []
    for spec in specs:
        label, _ = estimator_factory(spec, cfg)
        results = evaluate_episodes(spec, cfg)
        for r, _ in results:
            rows += [(label, r["seed"], k, _fmt(v)) for k, v in r.items() if k != "seed"]
        results[0][1].to_csv(out / f"trace_{label}.csv", chash)
    write_table(out / "metrics_long.csv", ("estimator", "seed", "metric", "value"), rows, chash)
    print(f"wrote {len(rows)} rows to {out / 'metrics_long.csv'}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser

def build_parser():
    p = _Parser(prog="neuromhe", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="INI configuration file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", default=".", help="output directory (default: .)")
        sp.add_argument("--jobs", type=int, help="worker processes for evaluation episodes")
        sp.add_argument("--horizon", type=int)
        sp.add_argument("--quiet", action="store_true")

    def world(sp):
        sp.add_argument("--scenario", help=", ".join(SCENARIOS))
        sp.add_argument("--duration", type=float)
        sp.add_argument("--dt", type=float)

    def estimator(sp, many=False):
        kw = {"action": "append"} if many else {}
        g = sp if many else sp.add_mutually_exclusive_group()
        g.add_argument("--checkpoint", help="network checkpoint (.npz)", **kw)
        g.add_argument("--dmhe", help="fixed-weight vector (.npz)", **kw)
        g.add_argument("--baseline", choices=("zero", "truth"), **kw)

    t = sub.add_parser("train", help="train NeuroMHE (rl or supervised) or DMHE")
    common(t)
    world(t)
    t.add_argument("--mode", choices=("rl", "supervised", "dmhe"))
    t.add_argument("--episodes", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--data", help="flight CSV (supervised mode)")
    t.add_argument("--expected-dt", type=float, default=2.5e-3)
    t.add_argument("--with-control", action="store_true",
                   help="feed recorded thrust/torque to the model; target excludes them")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="RMSE over seeded episodes or a flight CSV")
    common(e)
    world(e)
    estimator(e)
    e.add_argument("--eval-episodes", dest="eval_episodes", type=int)
    e.add_argument("--data", help="flight CSV; evaluates disturbance estimates offline")
    e.add_argument("--expected-dt", type=float, default=2.5e-3)
    e.add_argument("--with-control", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("gradcheck", help="analytic gradient against oracles")
    common(g)
    g.add_argument("--instances", type=int)
    g.add_argument("--corrupt", action="store_true", help="negative control: perturb one block")
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench-grad", help="gradient solver time versus horizon")
    common(b)
    b.add_argument("--reps", type=int)
    b.set_defaults(func=cmd_bench_grad)

    s = sub.add_parser("simulate", help="one closed-loop run or a synthetic flight CSV")
    common(s)
    world(s)
    estimator(s)
    s.add_argument("--dataset", action="store_true", help="write flight.csv instead of a trace")
    s.add_argument("--dataset-dt", type=float, default=2.5e-3)
    s.set_defaults(func=cmd_simulate)

    x = sub.add_parser("export-plots-data", help="tidy CSVs for figures")
    common(x)
    world(x)
    estimator(x, many=True)
    x.add_argument("--eval-episodes", dest="eval_episodes", type=int)
    x.set_defaults(func=cmd_export_plots_data)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return args.func(args, build_config(args))
    except (UsageError, ConfigError, ParseError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GradientFailure, NonConvergenceError, NumericalError, np.linalg.LinAlgError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
