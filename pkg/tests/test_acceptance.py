"""Acceptance criteria 1-12, each run at its stated tolerance.

Every test appends one PASS/FAIL line to the acceptance summary printed at
the end of the pytest run, then asserts the same condition.
"""

import logging
import multiprocessing as mp
import time

import numpy as np
import pytest

from properties import SUITES, run_suite
from tangentlin import activations, cli
from tangentlin.analysis import (bottleneck_block_stat, bottleneck_spec, bound_report, hessian_spectral_norm,
                                 mean_fit, tangent_kernel)
from tangentlin.checks import derivative_checks, hessian_norm_checks
from tangentlin.config import ExperimentConfig
from tangentlin.network import FullyConnected, NetworkSpec, Shallow, forward, init_weights

logger = logging.getLogger(__name__)

X1 = np.array([1.0])
SWEEP_EXPONENTS = range(6, 15)
SWEEP_SEEDS = range(5)
LANCZOS = dict(tol=1e-8, max_iter=20000, method="lanczos")
FLOAT32_FROM = 4096
SEEDS10 = list(range(10))
MINUTE = 60.0


def _record(log, number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    log.append(line)
    print(line)
    return ok


def _within(v, lo, hi):
    return lo <= v <= hi


# ---------------------------------------------------------------- 1, 2

def test_criterion_01_derivatives(acceptance_log):
    t = time.perf_counter()
    results = derivative_checks(m=16, seed=0)
    elapsed = time.perf_counter() - t
    archs = {r.architecture for r in results}
    worst_g = max(r.error for r in results if r.check.startswith("gradient"))
    worst_h = max(r.error for r in results if r.check.startswith("hvp"))
    ok = all(r.passed for r in results) and len(archs) >= 5 and elapsed < MINUTE
    _record(acceptance_log, 1, ok, f"{len(archs)} architectures, max grad err {worst_g:.1e} (<1e-6), "
                                   f"max hvp err {worst_h:.1e} (<1e-5), {elapsed:.1f}s")
    assert ok


def test_criterion_02_hessian_norm_oracle(acceptance_log):
    t = time.perf_counter()
    results = hessian_norm_checks(seed=0, method="power")
    elapsed = time.perf_counter() - t
    worst = max(r.error for r in results)
    ok = all(r.passed for r in results) and elapsed < MINUTE
    _record(acceptance_log, 2, ok, f"{len(results)} nets, max rel err {worst:.1e} (<1e-6), {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 3, 4, 7

def _sweep_spec(kind, m):
    if kind == "shallow":
        return NetworkSpec(1, (Shallow(m, "tanh"),))
    return NetworkSpec(1, tuple(FullyConnected(m, "tanh") for _ in range(3)))


@pytest.fixture(scope="module")
def tanh_sweep():
    """Init-time measurements for shallow and depth-3 tanh nets, x = 1."""
    records = []
    for kind in ("shallow", "fc3"):
        for e in SWEEP_EXPONENTS:
            m = 2 ** e
            spec = _sweep_spec(kind, m)
            dtype = np.float32 if kind == "fc3" and m >= FLOAT32_FROM else np.float64
            for seed in SWEEP_SEEDS:
                r = dict(kind=kind, m=m, seed=seed)
                t = time.perf_counter()
                W = init_weights(spec, seed=seed, dtype=dtype)
                r["t_init"] = time.perf_counter() - t

                t = time.perf_counter()
                h = hessian_spectral_norm(spec, W, X1, seed=seed, **LANCZOS)
                r.update(h=h.value, h_converged=h.converged, t_h=time.perf_counter() - t)

                t = time.perf_counter()
                f = float(forward(spec, W, X1).output[0, 0])
                g2 = tangent_kernel(spec, W, X1).entry(0, 0, 0, 0)
                for head in ("quadratic", "swish"):
                    ht = hessian_spectral_norm(spec.with_head(head), W, X1, seed=seed, **LANCZOS)
                    act = activations.get(head)
                    r[head] = ht.value
                    r[head + "_converged"] = ht.converged
                    r[head + "_rhs"] = abs(act.d2(f)) * g2 - abs(act.d1(f)) * h.value
                r["t_head"] = time.perf_counter() - t

                t = time.perf_counter()
                rep = bound_report(spec, W, X1, seed=seed, tol=1e-8, method="lanczos", max_iter=LANCZOS["max_iter"])
                r.update(bound=rep.bound, bound_h=rep.hessian_norm, t_bound=time.perf_counter() - t)
                logger.info("sweep %s m=%d seed=%d |H|=%.4g bound=%.4g", kind, m, seed, h.value, rep.bound)
                records.append(r)
                del W
    return records


def _total(records, *keys):
    return sum(r[k] for r in records for k in keys)


def test_criterion_03_hessian_scaling(tanh_sweep, acceptance_log):
    parts, ok = [], True
    for kind in ("shallow", "fc3"):
        recs = [r for r in tanh_sweep if r["kind"] == kind]
        fit = mean_fit([(r["m"], r["h"]) for r in recs])
        good = _within(fit.slope, -0.65, -0.35) and all(r["h_converged"] for r in recs)
        ok &= good
        parts.append(f"{kind} slope {fit.slope:.3f}")
    elapsed = _total(tanh_sweep, "t_init", "t_h")
    ok &= elapsed < 10 * MINUTE
    _record(acceptance_log, 3, ok, f"{', '.join(parts)} (band [-0.65,-0.35]), {elapsed / MINUTE:.1f} min")
    assert ok


def test_criterion_04_nonlinear_head(tanh_sweep, acceptance_log):
    parts, ok = [], True
    for kind in ("shallow", "fc3"):
        recs = [r for r in tanh_sweep if r["kind"] == kind]
        fit = mean_fit([(r["m"], r["quadratic"]) for r in recs])
        ok &= _within(fit.slope, -0.1, 0.1) and all(r["quadratic_converged"] for r in recs)
        parts.append(f"{kind} slope {fit.slope:.3f}")
    ineq = all(r[h] >= r[h + "_rhs"] for r in tanh_sweep for h in ("quadratic", "swish"))
    ok &= ineq
    # each head costs about one Hessian norm; init is shared with criterion 3
    elapsed = _total(tanh_sweep, "t_init", "t_head") / 2
    ok &= elapsed < 10 * MINUTE
    swish = {kind: mean_fit([(r["m"], r["swish"]) for r in tanh_sweep if r["kind"] == kind]).slope
             for kind in ("shallow", "fc3")}
    _record(acceptance_log, 4, ok, f"quadratic head {', '.join(parts)} (band [-0.1,0.1]), "
                                   f"lower-bound inequality at all {2 * len(tanh_sweep)} points: {ineq}, "
                                   f"{elapsed / MINUTE:.1f} min; swish head (diagnostic) slopes "
                                   f"{swish['shallow']:.3f}/{swish['fc3']:.3f}")
    assert ok


def test_criterion_07_bound_holds(tanh_sweep, acceptance_log):
    held = [r["h"] <= r["bound"] for r in tanh_sweep]
    worst = max(r["h"] / r["bound"] for r in tanh_sweep)
    ok = all(held)
    _record(acceptance_log, 7, ok, f"bound holds on {sum(held)}/{len(held)} trials, max ratio |H|/bound "
                                   f"{worst:.3g}, {_total(tanh_sweep, 't_bound') / MINUTE:.1f} min")
    assert ok


# ---------------------------------------------------------------- 5, 6

def test_criterion_05_bottleneck_statistic(acceptance_log):
    t = time.perf_counter()
    stats, below = [], True
    for e in SWEEP_EXPONENTS:
        m = 2 ** e
        spec = bottleneck_spec(m)
        for seed in SWEEP_SEEDS:
            W = init_weights(spec, seed=seed)
            s = bottleneck_block_stat(spec, W, X1)
            h = hessian_spectral_norm(spec, W, X1, seed=seed, tol=1e-10, max_iter=20000, method="lanczos").value
            below &= s <= h
            stats.append((m, s))
    elapsed = time.perf_counter() - t
    fit = mean_fit(stats)
    ok = _within(fit.slope, -0.15, 0.15) and below and elapsed < 10 * MINUTE
    _record(acceptance_log, 5, ok, f"statistic slope {fit.slope:.3f} (band [-0.15,0.15]), "
                                   f"statistic <= |H| everywhere: {below}, {elapsed:.0f}s")
    assert ok


def _kernel_limit(x, nodes=80):
    z, w = np.polynomial.hermite_e.hermegauss(nodes)
    d1 = 1.0 - np.tanh(z * x) ** 2
    return x * x * float(np.sum(w * d1 ** 2) / np.sqrt(2 * np.pi))


def test_criterion_06_kernel_limit(acceptance_log):
    spec = NetworkSpec(1, (Shallow(100000, "tanh"),))
    vals = [tangent_kernel(spec, init_weights(spec, seed=s), X1).entry(0, 0, 0, 0) for s in SEEDS10]
    target = _kernel_limit(1.0)
    rel = abs(np.mean(vals) - target) / target
    ok = rel < 0.05
    _record(acceptance_log, 6, ok, f"mean K(1,1) {np.mean(vals):.5f} vs quadrature {target:.5f}, rel err {rel:.2e}")
    assert ok


# ---------------------------------------------------------------- 8, 10, 11

WIDTHS = [30, 100, 1000, 10000]
CE_CAP = 20000
SQUARE_CAP = 2000


@pytest.fixture(scope="module")
def width_sweep():
    cfg = ExperimentConfig("sweep-width", {"widths": WIDTHS, "max_epochs_ce": CE_CAP,
                                           "max_epochs_square": SQUARE_CAP})
    t = time.perf_counter()
    rows, extra = cli.cmd_sweep_width(cfg, SEEDS10, 1)
    runs = [dict(width=i["width"], seed=i["seed"], **i["runs"]) for i in extra["runs"]]
    return rows, runs, time.perf_counter() - t


def test_criterion_08_delta_k_widths(width_sweep, acceptance_log):
    rows, _, elapsed = width_sweep
    failed = [r for r in rows if "_status" in r]
    ok = not failed
    parts = []
    for head, lo, hi in (("linear", -0.8, -0.3), ("softmax", -0.15, 0.15), ("swish", -0.15, 0.15)):
        fit = mean_fit([(r["width"], r["delta_k"]) for r in rows
                        if r["head"] == head and "_status" not in r])
        ok &= _within(fit.slope, lo, hi)
        parts.append(f"{head} {fit.slope:.3f} [{lo},{hi}]")
    ok &= elapsed < 30 * MINUTE
    _record(acceptance_log, 8, ok, f"slopes {', '.join(parts)}, {len(failed)} failed cells, "
                                   f"{elapsed / MINUTE:.1f} min")
    assert ok


def test_criterion_10_training_converges(width_sweep, acceptance_log):
    rows, runs, _ = width_sweep
    parts, ok = [], True
    for loss, cap in (("cross-entropy", CE_CAP), ("square", SQUARE_CAP)):
        infos = [r[loss] for r in runs if loss in r]
        conv = sum(i["converged"] for i in infos)
        ok &= conv == len(runs)
        worst = max(i["final_loss"] for i in infos) if infos else float("nan")
        parts.append(f"{loss} {conv}/{len(runs)} below 1e-4 within {cap} epochs (worst final loss {worst:.2e})")
    conv_ce = {(r["width"], r["seed"]) for r in runs if r.get("cross-entropy", {}).get("converged")}
    conv_sq = {(r["width"], r["seed"]) for r in runs if r.get("square", {}).get("converged")}
    nonlinear = [r for r in rows if r["head"] in ("softmax", "swish") and "_status" not in r]
    strong = [r for r in nonlinear if (r["width"], r["seed"]) in (conv_ce if r["head"] == "softmax" else conv_sq)
              and r["delta_k"] >= 0.1]
    ok &= len(strong) == len(nonlinear)
    parts.append(f"nonlinear-head runs converged with delta_k >= 0.1: {len(strong)}/{len(nonlinear)}")
    _record(acceptance_log, 10, ok, "; ".join(parts))
    assert ok


def test_criterion_11_weight_change(width_sweep, acceptance_log):
    _, runs, _ = width_sweep
    ce = [(r["width"], r["cross-entropy"]) for r in runs if "cross-entropy" in r]
    fit2 = mean_fit([(w, i["dist_l2"]) for w, i in ce])
    fitinf = mean_fit([(w, i["dist_inf"]) for w, i in ce])
    conv = [r[loss] for r in runs for loss in ("cross-entropy", "square") if r.get(loss, {}).get("converged")]
    held = sum(i["lower_bound_holds"] for i in conv)
    ok = _within(fit2.slope, -0.2, 0.2) and _within(fitinf.slope, -0.7, -0.3) and held == len(conv) and conv
    _record(acceptance_log, 11, bool(ok), f"|W*-W0| slope {fit2.slope:.3f} [-0.2,0.2], |W*-W0|_inf slope "
                                          f"{fitinf.slope:.3f} [-0.7,-0.3], lower bound on {held}/{len(conv)} "
                                          f"converged runs")
    assert ok


# ---------------------------------------------------------------- 9

BOTTLENECK_WIDTH = 10000
BOTTLENECK_DEADLINE = 30 * MINUTE


def test_criterion_09_bottleneck_delta_k(acceptance_log):
    """Seed-major sweep under the runtime budget; cells past the deadline are cut."""
    cfg = ExperimentConfig("sweep-bottleneck", {"width": BOTTLENECK_WIDTH, "lr": "auto"})
    done = []
    start = time.perf_counter()
    cut = None
    ctx = mp.get_context("fork")
    for seed in SEEDS10:
        for mb in cli.DEFAULT_BOTTLENECKS:
            left = BOTTLENECK_DEADLINE - (time.perf_counter() - start)
            if left <= 0:
                cut = cut or (seed, mb)
                break
            with ctx.Pool(1) as pool:
                job = pool.apply_async(cli._bottleneck_cell, ((cfg, BOTTLENECK_WIDTH, mb, seed),))
                try:
                    done.append(job.get(timeout=left)[0])
                except mp.TimeoutError:
                    cut = (seed, mb)
                    pool.terminate()
        if cut:
            break
    elapsed = time.perf_counter() - start
    good = [r for r in done if "_status" not in r]
    slope = mean_fit([(r["bottleneck"], r["delta_k"]) for r in good]).slope if \
        len({r["bottleneck"] for r in good}) >= 3 else float("nan")
    complete = len(done) == len(SEEDS10) * len(cli.DEFAULT_BOTTLENECKS) and len(good) == len(done)
    ok = complete and _within(slope, -0.65, -0.35) and elapsed < BOTTLENECK_DEADLINE
    cut_msg = f", cut at seed {cut[0]} m_b={cut[1]}" if cut else ""
    pts = ", ".join(f"{r['bottleneck']}:{r['delta_k']:.3g}" for r in good)
    _record(acceptance_log, 9, ok, f"{len(done)}/{len(SEEDS10) * len(cli.DEFAULT_BOTTLENECKS)} cells in "
                                   f"{elapsed / MINUTE:.1f} min{cut_msg}; slope over completed cells {slope:.3f} "
                                   f"(band [-0.65,-0.35]); delta_k by m_b {pts}")
    assert ok


# ---------------------------------------------------------------- 12

def test_criterion_12_property_suites(acceptance_log):
    t = time.perf_counter()
    failures = {name: run_suite(name, trials=1000, seed=12) for name in sorted(SUITES)}
    elapsed = time.perf_counter() - t
    ok = not any(failures.values())
    summary = ", ".join(f"{name} {1000 - len(f)}/1000" for name, f in failures.items())
    _record(acceptance_log, 12, ok, f"{summary}, {elapsed:.0f}s")
    assert ok
