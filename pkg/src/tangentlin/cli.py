"""Command-line experiment driver.

Usage: ``tangentlin COMMAND [--config PATH] [--out DIR] [--seeds N] [--jobs N]``.
Each command writes ``<out>/<name>.csv`` with a fixed header and a JSON
manifest ``<out>/<name>.json`` echoing the config, seeds and versions.
"""

import argparse
import csv
import io
import json
import logging
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import scipy

from . import __version__, rng
from .analysis import bottleneck_spec, bound_report, hessian_spectral_norm, kappa, kernel_change_vs_hessian_check, \
    tangent_kernel
from .checks import derivative_checks, hessian_norm_checks
from .config import ConfigError, ExperimentConfig, load_config
from .derivatives import SmoothnessError
from .network import Conv1D, FullyConnected, NetworkSpec, NumericalError, Residual, Shallow, as_batch, init_weights
from .training import (DivergenceError, bottleneck_experiment_spec, gradient_descent, line_search_lr,
                       make_synthetic_dataset, shallow_experiment_spec, weight_change_report)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_UNKNOWN_COMMAND = 4
EXIT_OUTPUT = 5

HEADERS = {
    "check-derivatives": ["architecture", "check", "seed", "error", "tolerance", "passed"],
    "norms-report": ["width", "seed", "hessian_norm", "q_inf", "q_l", "q_221", "lipschitz_phi", "bound",
                     "kernel_trace", "kappa", "ball_change", "ball_bound"],
    "sweep-width": ["width", "seed", "head", "delta_k", "hessian_norm_init", "kernel_trace_init", "q_inf", "q_l",
                    "q_221", "bound"],
    "sweep-bottleneck": ["width", "bottleneck", "seed", "delta_k", "final_loss", "epochs", "converged"],
    "train": ["epoch", "loss", "delta_k_t"],
}

DEFAULT_WIDTHS = (30, 100, 1000, 10000, 100000)
LARGE_WIDTH = 100000
DEFAULT_BOTTLENECKS = (3, 5, 10, 50, 100, 500, 1000)
# Lanczos steps; clustered spectra of wide shallow nets need thousands
MAX_ITER = 20000
# Learning rates picked once by line_search_lr on seed 0 (see README).
DEFAULT_LR = {"cross-entropy": 2.0, "square": 0.015625, "bottleneck": 0.5}


# --- helpers ---------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        if not np.isfinite(v):
            return ""
        return repr(float(v))
    return str(v)


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(row.get(k)) for k in header])
    return buf.getvalue()


def _failure_row(keys, exc):
    """Status row for a cell that failed; the status sits in the first value column."""
    return dict(keys, _status=f"failed:{type(exc).__name__}")


def resolve_seeds(cfg, count=None):
    """Seed list from ``--seeds``/``seeds`` shifted by ``seed`` or ``TL_SEED``."""
    base = os.environ.get("TL_SEED")
    try:
        base = int(base) if base is not None else int(cfg.get("seed", 0))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad global seed: {exc}") from exc
    if count is not None:
        if count < 1:
            raise ConfigError("--seeds must be positive")
        seeds = list(range(count))
    else:
        raw = cfg.get("seeds", 1)
        if isinstance(raw, list):
            seeds = cfg.as_list("seeds", kind=int)
        elif isinstance(raw, int) and not isinstance(raw, bool) and raw >= 1:
            seeds = list(range(raw))
        else:
            raise ConfigError(f"seeds must be a positive count or a list, got {raw!r}")
    if not seeds:
        raise ConfigError("seeds must be non-empty")
    return [base + s for s in seeds]


def build_spec(cfg, width=None):
    """Network from ``architecture`` and shape keys of a config."""
    arch = cfg.get("architecture", "fc")
    m = int(width if width is not None else cfg.number("width", 64, int, positive=True))
    act = cfg.get("activation", "tanh")
    head = cfg.get("head", "linear")
    out = int(cfg.number("output_dim", 1, int, positive=True))
    depth = int(cfg.number("depth", 3, int, positive=True))
    d = int(cfg.number("input_dim", 1, int, positive=True))
    param = cfg.get("parameterization", "ntk")
    try:
        if arch == "experiment":
            return shallow_experiment_spec(m, head)
        if arch == "bottleneck-experiment":
            return bottleneck_experiment_spec(m, int(cfg.number("bottleneck", 10, int, positive=True)), head)
        if arch == "bottleneck":
            return bottleneck_spec(m, head=head, output_dim=out)
        if arch == "shallow":
            return NetworkSpec(d, (Shallow(m, act),), head=head, output_dim=out, parameterization=param)
        if arch == "fc":
            layers = tuple(FullyConnected(m, act, bias=bool(cfg.get("bias", False))) for _ in range(depth))
        elif arch == "residual":
            layers = (FullyConnected(m, act),) + tuple(Residual(m, act) for _ in range(depth - 1))
        elif arch == "conv":
            pixels = int(cfg.number("pixels", d, int, positive=True))
            layers = tuple(Conv1D(m, pixels, int(cfg.get("filter", 3)), act) for _ in range(depth))
        else:
            raise ConfigError(f"unknown architecture {arch!r}")
        return NetworkSpec(d, layers, head=head, output_dim=out, parameterization=param)
    except (ValueError, TypeError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid network: {exc}") from exc


def _lr(cfg, key, default, spec, W0, data, loss):
    v = cfg.get(key, default)
    if v == "auto":
        return line_search_lr(spec, W0, data, loss)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or v <= 0:
        raise ConfigError(f"{key} must be a positive number or 'auto', got {v!r}")
    return float(v)


def _map(fn, cells, jobs):
    if jobs <= 1 or len(cells) <= 1:
        return [fn(c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, cells))


# --- commands --------------------------------------------------------------

def cmd_check_derivatives(cfg, seeds, jobs):
    m = int(cfg.number("width", 16, int, positive=True))
    archs = cfg.as_list("architectures")
    rows, failed = [], 0
    for seed in seeds:
        results = derivative_checks(m, seed, archs)
        if cfg.get("hessian", True):
            results += hessian_norm_checks(seed)
        for r in results:
            failed += not r.passed
            rows.append(dict(architecture=r.architecture, check=r.check, seed=seed, error=r.error,
                             tolerance=r.tolerance, passed=r.passed))
    return rows, {"failed": failed}


def _norms_cell(args):
    cfg, width, seed = args
    spec = build_spec(cfg, width)
    W = init_weights(spec, seed=seed)
    gen = rng.stream(seed, "norms-report", width)
    x = np.asarray(cfg.as_list("x", kind=float) or np.ones(spec.input_dim), dtype=float)
    if x.size != spec.input_dim:
        raise ConfigError(f"x has {x.size} entries, expected {spec.input_dim}")
    method = cfg.get("method", "lanczos")
    tol = cfg.number("tol", 1e-8)
    max_iter = int(cfg.number("max_iter", MAX_ITER, int, positive=True))
    row = dict(width=width, seed=seed)
    row["kernel_trace"] = tangent_kernel(spec, W, x).trace
    if spec.head == "linear":
        rep = bound_report(spec, W, x, seed=seed, tol=tol, method=method, max_iter=max_iter)
        row.update(hessian_norm=rep.hessian_norm, q_inf=rep.q.q_inf, q_l=rep.q.q_l, q_221=rep.q.q_221,
                   lipschitz_phi=rep.lipschitz, bound=rep.bound)
    else:
        row["hessian_norm"] = hessian_spectral_norm(spec, W, x, tol=tol, max_iter=max_iter, seed=seed,
                                                    method=method).value
    n = int(cfg.number("kappa_inputs", 4, int, positive=True))
    X = gen.standard_normal((n, spec.input_dim))
    Y = gen.standard_normal((n, spec.output_dim))
    row["kappa"] = kappa(spec, W, X, Y, alpha=cfg.number("alpha", 1.0)).value
    if "radius" in cfg.values:
        ball = kernel_change_vs_hessian_check(spec, W, np.stack([x, X[0]]), cfg.number("radius", positive=True),
                                              probes=int(cfg.number("probes", 100, int, positive=True)), seed=seed)
        row.update(ball_change=ball.kernel_change, ball_bound=ball.bound)
    return [row]


def cmd_norms_report(cfg, seeds, jobs):
    widths = cfg.positive_ints("widths", cfg.get("width", 256))
    build_spec(cfg, widths[0])
    cells = [(cfg, w, s) for w in widths for s in seeds]
    return [r for rows in _map(_norms_cell, cells, jobs) for r in rows], {}


def _sweep_width_cell(args):
    cfg, width, seed = args
    data = make_synthetic_dataset(int(cfg.get("dataset_seed", 0)))
    act = cfg.get("activation", "relu")
    tol = cfg.number("tol", 1e-4, positive=True)
    every = int(cfg.number("snapshot_every", 10, int))
    rows, info = [], {}

    def spec_for(head):
        if act == "relu":
            return shallow_experiment_spec(width, head)
        return NetworkSpec(1, (FullyConnected(width, act, bias=True),), head=head, output_dim=3)

    def init_stats(spec, W, view_spec):
        out = {}
        x0 = data.x[0]
        X = as_batch(spec, data.x)
        out["kernel_trace_init"] = tangent_kernel(view_spec, W, X).trace
        if view_spec.smooth:
            out["hessian_norm_init"] = hessian_spectral_norm(view_spec, W, x0, tol=1e-8, max_iter=MAX_ITER,
                                                             seed=seed, method="lanczos").value
            if view_spec.head == "linear":
                q = [bound_report(view_spec, W, x0, out_index=a, seed=seed, tol=1e-8, method="lanczos",
                                  max_iter=MAX_ITER)
                     for a in range(view_spec.output_dim)]
                worst = max(q, key=lambda r: r.bound)
                out.update(q_inf=worst.q.q_inf, q_l=worst.q.q_l, q_221=worst.q.q_221, bound=worst.bound)
        return out

    runs = [("cross-entropy", "softmax", (("linear", "pre"), ("softmax", "post"))),
            ("square", "swish", (("swish", "post"),))]
    for loss, head, views in runs:
        spec = spec_for(head)
        W0 = init_weights(spec, seed=seed)
        key = "lr_ce" if loss == "cross-entropy" else "lr_square"
        cap = int(cfg.number("max_epochs_ce" if loss == "cross-entropy" else "max_epochs_square",
                             cfg.get("max_epochs", 20000), int, positive=True))
        try:
            lr = _lr(cfg, key, DEFAULT_LR[loss], spec, W0, data, loss)
            traj = gradient_descent(spec, W0, data, loss, lr, cap, tol, every, views=tuple(v for _, v in views))
        except (NumericalError, SmoothnessError) as exc:
            logger.warning("width %d seed %d %s run failed: %s", width, seed, loss, exc)
            rows += [_failure_row(dict(width=width, seed=seed, head=h), exc) for h, _ in views]
            continue
        rep = weight_change_report(traj, spec, data)
        info[loss] = dict(converged=traj.converged, epochs=traj.final_epoch, final_loss=traj.final_loss, lr=lr,
                          dist_l2=rep.dist_l2, dist_inf=rep.dist_inf, lower_bound=rep.lower_bound,
                          lower_bound_holds=rep.holds)
        for h, view in views:
            row = dict(width=width, seed=seed, head=h, delta_k=traj.delta_k(view))
            row.update(init_stats(spec, W0, spec.with_head("linear") if view == "pre" else spec))
            rows.append(row)
    return rows, dict(width=width, seed=seed, runs=info)


def cmd_sweep_width(cfg, seeds, jobs):
    widths = cfg.positive_ints("widths", list(DEFAULT_WIDTHS))
    if max(widths) > LARGE_WIDTH and not cfg.get("large_widths", False):
        raise ConfigError(f"widths above {LARGE_WIDTH} need large_widths = true")
    if cfg.get("activation", "relu") not in ("relu", "tanh", "sigmoid", "swish"):
        raise ConfigError("activation must be relu, tanh, sigmoid or swish")
    cells = [(cfg, w, s) for w in widths for s in seeds]
    out = _map(_sweep_width_cell, cells, jobs)
    return [r for rows, _ in out for r in rows], {"runs": [info for _, info in out]}


def _bottleneck_cell(args):
    cfg, m, mb, seed = args
    data = make_synthetic_dataset(int(cfg.get("dataset_seed", 0)))
    spec = bottleneck_experiment_spec(m, mb)
    W0 = init_weights(spec, seed=seed)
    row = dict(width=m, bottleneck=mb, seed=seed)
    try:
        lr = _lr(cfg, "lr", DEFAULT_LR["bottleneck"], spec, W0, data, "cross-entropy")
        traj = gradient_descent(spec, W0, data, "cross-entropy", lr, int(cfg.number("max_epochs", 20000, int)),
                                cfg.number("tol", 1e-4, positive=True),
                                int(cfg.number("snapshot_every", 10, int)), views=(cfg.get("view", "pre"),))
    except NumericalError as exc:
        logger.warning("bottleneck %d seed %d failed: %s", mb, seed, exc)
        return [_failure_row(row, exc)]
    row.update(delta_k=traj.delta_k(cfg.get("view", "pre")), final_loss=traj.final_loss, epochs=traj.final_epoch,
               converged=traj.converged)
    return [row]


def cmd_sweep_bottleneck(cfg, seeds, jobs):
    m = int(cfg.number("width", 10000, int, positive=True))
    mbs = cfg.positive_ints("bottlenecks", list(DEFAULT_BOTTLENECKS))
    if cfg.get("view", "pre") not in ("pre", "post"):
        raise ConfigError("view must be pre or post")
    cells = [(cfg, m, mb, s) for mb in mbs for s in seeds]
    return [r for rows in _map(_bottleneck_cell, cells, jobs) for r in rows], {}


def cmd_train(cfg, seeds, jobs):
    values = dict(cfg.values)
    values.setdefault("architecture", "experiment")
    values.setdefault("width", 10000)
    values.setdefault("head", "softmax")
    cfg = ExperimentConfig(cfg.command, values)
    spec = build_spec(cfg)
    loss = cfg.get("loss", "cross-entropy" if spec.head == "softmax" else "square")
    if loss not in ("square", "cross-entropy") or (loss == "cross-entropy" and spec.head != "softmax"):
        raise ConfigError(f"loss {loss!r} does not fit head {spec.head!r}")
    view = cfg.get("view", "post")
    if view not in ("pre", "post"):
        raise ConfigError("view must be pre or post")
    seed = seeds[0]
    data = make_synthetic_dataset(int(cfg.get("dataset_seed", 0)))
    if spec.input_dim != 1:
        raise ConfigError("train uses the scalar synthetic dataset; input_dim must be 1")
    if spec.output_dim != data.C:
        raise ConfigError(f"output_dim must be {data.C} for the synthetic dataset")
    W0 = init_weights(spec, seed=seed)
    lr = _lr(cfg, "lr", DEFAULT_LR[loss], spec, W0, data, loss)
    traj = gradient_descent(spec, W0, data, loss, lr, int(cfg.number("max_epochs", 20000, int, positive=True)),
                            cfg.number("tol", 1e-4, positive=True), int(cfg.number("snapshot_every", 10, int)),
                            views=(view,))
    series = dict(traj.delta_k_series[view])
    rows = [dict(epoch=e, loss=traj.losses[e], delta_k_t=series[e]) for e in traj.snapshot_epochs]
    rep = weight_change_report(traj, spec, data)
    return rows, dict(seed=seed, lr=lr, converged=traj.converged, epochs=traj.final_epoch,
                      final_loss=traj.final_loss, delta_k=traj.delta_k(view), dist_l2=rep.dist_l2,
                      dist_inf=rep.dist_inf, lower_bound=rep.lower_bound, lower_bound_holds=rep.holds)


COMMANDS = {
    "check-derivatives": cmd_check_derivatives,
    "norms-report": cmd_norms_report,
    "sweep-width": cmd_sweep_width,
    "sweep-bottleneck": cmd_sweep_bottleneck,
    "train": cmd_train,
}


def _manifest(command, cfg, seeds, jobs, extra):
    return {
        "command": command,
        "config": cfg.values,
        "seeds": seeds,
        "jobs": jobs,
        "tl_seed": os.environ.get("TL_SEED"),
        "header": HEADERS[command],
        "versions": {"tangentlin": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "results": extra,
    }


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o) if np.isfinite(o) else None
    if isinstance(o, (np.bool_,)):
        return bool(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def _writable_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError:
        return False
    return os.path.isdir(path) and os.access(path, os.W_OK)


def _apply_status(rows, header):
    out = []
    first_value = header[3] if len(header) > 3 else header[-1]
    for r in rows:
        r = dict(r)
        status = r.pop("_status", None)
        if status is not None:
            r[first_value] = status
        out.append(r)
    return out


def run(command, cfg, seeds, out_dir, jobs=1):
    """Run one command and write its artifacts; returns an exit status."""
    if command not in COMMANDS:
        return EXIT_UNKNOWN_COMMAND
    if not _writable_dir(out_dir):
        logger.error("output directory %s is not writable", out_dir)
        return EXIT_OUTPUT
    try:
        rows, extra = COMMANDS[command](cfg, seeds, jobs)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except (NumericalError, SmoothnessError, ArithmeticError) as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    header = HEADERS[command]
    stem = os.path.join(out_dir, str(cfg.get("output", command)))
    try:
        with open(stem + ".csv", "w", encoding="utf-8", newline="") as fh:
            fh.write(_csv_text(header, _apply_status(rows, header)))
        with open(stem + ".json", "w", encoding="utf-8") as fh:
            json.dump(_manifest(command, cfg, seeds, jobs, extra), fh, indent=2, sort_keys=True,
                      default=_json_default)
            fh.write("\n")
    except OSError as exc:
        logger.error("cannot write output: %s", exc)
        return EXIT_OUTPUT
    logger.info("wrote %s.csv (%d rows)", stem, len(rows))
    if command == "check-derivatives" and extra.get("failed"):
        return EXIT_NUMERICAL
    return EXIT_OK


def main(argv=None):
    parser = argparse.ArgumentParser(prog="tangentlin", description="Tangent kernel and Hessian experiments.")
    parser.add_argument("command", help=", ".join(COMMANDS))
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--out", default=".", help="output directory (default: current)")
    parser.add_argument("--seeds", type=int, help="number of seeds (overrides the config)")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command not in COMMANDS:
        print(f"unknown command {args.command!r}; choose from {', '.join(COMMANDS)}", file=sys.stderr)
        return EXIT_UNKNOWN_COMMAND
    try:
        values = load_config(args.config) if args.config else {}
        cfg = ExperimentConfig(args.command, values)
        seeds = resolve_seeds(cfg, args.seeds)
        if args.jobs < 1:
            raise ConfigError("--jobs must be positive")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(args.command, cfg, seeds, args.out, args.jobs)


if __name__ == "__main__":
    sys.exit(main())
