"""Acceptance criteria 1-7.

Each test prints one ``CRITERION n: PASS|FAIL`` line (also collected in the
terminal summary) and then asserts the verdict, so an unmet criterion shows
up as a failing test.  Expensive fits are cached and shared between
criteria.  All runs use root seed 0 unless a sweep over seeds is required.
"""

import functools
import sys
import time

import numpy as np
import pytest
import scipy.stats

from gpdyn import dataio, dynamics, pipeline
from gpdyn import inference_linear as il
from gpdyn import inference_mcmc as mc
from gpdyn.gp import GPStateModel
from gpdyn.kernels import SEKernel

TRUTH_A = np.array([1.5, 1.0, 1.0, 3.0])  # (alpha, beta, delta, gamma)
SEED = 0


def _report(request, n, ok, detail):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} | {detail}"
    request.config.gpdyn_acceptance.append(line)
    sys.__stdout__.write(f"\n{line}\n")
    sys.__stdout__.flush()
    assert ok, line


def _abgd(posteriors):
    """Case A posterior as (alpha, beta, delta, gamma) means and sds."""
    (m1, m2), (s1, s2) = [p.mean for p in posteriors], [p.sd for p in posteriors]
    return np.array([m1[0], -m1[1], m2[0], -m2[1]]), np.array([s1[0], s1[1], s2[0], s2[1]])


@functools.lru_cache(maxsize=None)
def lv_data(density, noise, seed):
    train, _ = dataio.generate_benchmark("lotka-volterra", density=density, noise_level=noise, seed=seed)
    return train


@functools.lru_cache(maxsize=None)
def lv_fit(scenario, density, noise, seed):
    tr = lv_data(density, noise, seed)
    dicts, truth = pipeline.dictionaries_for("lotka-volterra", scenario)
    return pipeline.fit_affine(tr.times, tr.values, dicts, scenario=scenario, truth=truth, seed=seed)


@functools.lru_cache(maxsize=None)
def lv_baseline(density, noise, seed):
    tr = lv_data(density, noise, seed)
    dicts, truth = pipeline.dictionaries_for("lotka-volterra", "case-a")
    return pipeline.fit_baseline(tr.times, tr.values, dicts, truth, smooth=noise > 0)[1]


# 1 ===========================================================================
def test_criterion_1_noise_free_case_a(request):
    full = lv_fit("case-a", 1.0, 0.0, SEED)
    scarce = lv_fit("case-a", 0.01, 0.0, SEED)
    m_full, s_full = _abgd(full.posteriors)
    m_scarce, _ = _abgd(scarce.posteriors)
    err_full = np.abs(m_full - TRUTH_A).max()
    err_scarce = np.abs(m_scarce - TRUTH_A).max()
    checks = {
        "100% means within 0.02": err_full < 0.02,
        "100% sds <= 1e-3": s_full.max() <= 1e-3,
        "1% means within 0.06": err_scarce < 0.06,
        "runtime < 60 s": max(full.runtime, scarce.runtime) < 60,
    }
    failed = [k for k, v in checks.items() if not v]
    detail = (
        f"100%: means {np.round(m_full, 5).tolist()} max err {err_full:.2e}, max sd {s_full.max():.2e}; "
        f"1%: means {np.round(m_scarce, 4).tolist()} max err {err_scarce:.3f}; "
        f"runtime {full.runtime:.1f}s/{scarce.runtime:.1f}s"
        + (f"; unmet: {', '.join(failed)}" if failed else "")
    )
    _report(request, 1, not failed, detail)


# 2 ===========================================================================
def test_criterion_2_noisy_rows(request):
    clean = lv_fit("case-a", 1.0, 0.0, SEED)
    noisy = lv_fit("case-a", 1.0, 0.1, SEED)
    mid = lv_fit("case-a", 0.05, 0.2, SEED)
    worst = lv_fit("case-a", 0.01, 0.2, SEED)
    _, sd_clean = _abgd(clean.posteriors)
    _, sd_noisy = _abgd(noisy.posteriors)
    finite = all(np.all(np.isfinite(p.mean)) and np.all(np.isfinite(p.covariance)) for p in worst.posteriors)
    checks = {
        "10%/100% eps1 < 2": noisy.eps[0] < 2.0,
        "noisy sds exceed noise-free sds": bool(np.all(sd_noisy > sd_clean)),
        "20%/5% eps1 < 15": mid.eps[0] < 15.0,
        "20%/1% finite": finite,
    }
    failed = [k for k, v in checks.items() if not v]
    detail = (
        f"10%noise/100%: eps1 {noisy.eps[0]:.2f}%, sd ratio min {np.min(sd_noisy / sd_clean):.1e}; "
        f"20%/5%: eps1 {mid.eps[0]:.2f}%; 20%/1%: eps1 {worst.eps[0]:.1f}% finite={finite}"
        + (f"; unmet: {', '.join(failed)}" if failed else "")
    )
    _report(request, 2, not failed, detail)


# 3 ===========================================================================
SWEEP_DENSITIES = (0.01, 0.05, 0.1, 0.5)
SWEEP_NOISE = (0.0, 0.1, 0.2)
SWEEP_SEEDS = (0, 1, 2, 3)


def test_criterion_3_sparse_identification(request):
    res = lv_fit("case-b", 0.1, 0.0, SEED)
    names = il.lv_case_b_dictionaries()[0].names
    want = [{"x1", "x1*x2"}, {"x2", "x1*x2"}]
    got = [{names[j] for j in pat.active} for pat in res.patterns]
    sets_ok = got == want
    ratios = []
    for post, pat in zip(res.posteriors, res.patterns):
        sparse = [j for j in range(len(names)) if j not in pat.active]
        ratios.append(post.sd[list(pat.active)].min() / post.sd[sparse].max() if sparse else np.inf)
    ratio_ok = min(ratios) >= 100.0

    monotone = 0
    for noise in SWEEP_NOISE:
        for seed in SWEEP_SEEDS:
            eps = np.array([lv_fit("case-b", d, noise, seed).eps for d in SWEEP_DENSITIES])
            monotone += bool(np.all(np.diff(eps[:, 0]) < 0) and np.all(np.diff(eps[:, 1]) < 0))
    n_runs = len(SWEEP_NOISE) * len(SWEEP_SEEDS)
    conv_ok = monotone >= 10

    checks = {"active sets": sets_ok, "sd ratio >= 100": ratio_ok, "monotone in >= 10/12": conv_ok}
    failed = [k for k, v in checks.items() if not v]
    detail = (
        f"active {[sorted(g) for g in got]}; active/sparse sd ratio {min(ratios):.2f}; "
        f"monotone eps1 and eps2 in {monotone}/{n_runs} seedings"
        + (f"; unmet: {', '.join(failed)}" if failed else "")
    )
    _report(request, 3, not failed, detail)


# 4 ===========================================================================
def test_criterion_4_baseline(request):
    cells = []
    for noise in (0.1, 0.2):
        for density in (0.1, 0.05, 0.01):
            gp_eps = lv_fit("case-a", density, noise, SEED).eps[0]
            fd_eps = lv_baseline(density, noise, SEED)
            cells.append((noise, density, gp_eps, fd_eps))
    dominates = all(g <= f for _, _, g, f in cells)
    gp0 = lv_fit("case-a", 1.0, 0.0, SEED).eps[0]
    fd0 = lv_baseline(1.0, 0.0, SEED)
    ratio = max(gp0, fd0) / min(gp0, fd0)
    parity = ratio <= 2.0
    checks = {"GP <= FD in every noisy cell": dominates, "noise-free ratio within 2x": parity}
    failed = [k for k, v in checks.items() if not v]
    grid = ", ".join(f"{int(n * 100)}%/{d * 100:g}%: {g:.2f} vs {f:.1f}" for n, d, g, f in cells)
    detail = (
        f"eps1 GP vs FD+LinReg [{grid}]; noise-free 100%: GP {gp0:.4f} vs FD {fd0:.4f} (ratio {ratio:.2f})"
        + (f"; unmet: {', '.join(failed)}" if failed else "")
    )
    _report(request, 4, not failed, detail)


# 5 ===========================================================================
def _logistic_run(train_fraction):
    tr, _ = dataio.generate_benchmark("logistic", train_fraction=train_fraction, seed=SEED)
    res = pipeline.fit_network([(tr.times, tr.values)], seed=SEED)
    t = np.linspace(0.0, 9.0, 901)
    pred = pipeline.predict_network(res.net, res.chain, [0.01], t, seed=pipeline.stage_seed(SEED, "predict"))
    return t, pred, res


def test_criterion_5_logistic_network(request):
    t, pred, res = _logistic_run(None)
    exact = dynamics.logistic_solution(t, 0.01)
    cover = t <= 4.5
    rmse = np.sqrt(np.mean((pred.mean[cover, 0] - exact[cover]) ** 2))
    i2, i9 = np.argmin(np.abs(t - 2.0)), np.argmin(np.abs(t - 9.0))
    inflation = pred.sd[i9, 0] / pred.sd[i2, 0]
    t_full, pred_full, res_full = _logistic_run(1.0)
    rmse_full = np.sqrt(np.mean((pred_full.mean[:, 0] - dynamics.logistic_solution(t_full, 0.01)) ** 2))
    checks = {"RMSE on [0,4.5] < 0.02": rmse < 0.02, "band inflation >= 5": inflation >= 5,
              "full-domain RMSE < 0.02": rmse_full < 0.02}
    failed = [k for k, v in checks.items() if not v]
    detail = (
        f"RMSE [0,4.5] {rmse:.2e}; sd(t=9)/sd(t=2) {inflation:.1f}; full-domain RMSE {rmse_full:.2e}; "
        f"acceptance {res.chain.acceptance_rate:.2f}/{res_full.chain.acceptance_rate:.2f}"
        + (f"; unmet: {', '.join(failed)}" if failed else "")
    )
    _report(request, 5, not failed, detail)


# 6 ===========================================================================
def test_criterion_6_black_hole(request):
    tr, _ = dataio.generate_benchmark("black-hole", seed=SEED)
    clean = pipeline.fit_black_hole(tr.times, tr.values, seed=SEED)
    e, p = clean.chain.mean
    tr_n, test = dataio.generate_benchmark("black-hole", noise_level=0.001, seed=SEED)
    noisy = pipeline.fit_black_hole(tr_n.times, tr_n.values, seed=SEED)
    t = np.linspace(0.0, 6e4, 601)
    pred = pipeline.predict_shared(dynamics.black_hole(), noisy.chain, np.array([0.0, np.pi]), t,
                                   seed=pipeline.stage_seed(SEED, "predict"))
    truth = test.values[np.searchsorted(test.times, t)]
    sel = t > 1e4
    inside = np.abs(pred.mean[sel] - truth[sel]) <= pred.sd[sel]
    checks = {"|e-0.5| < 0.01": abs(e - 0.5) < 0.01, "|p-100| < 0.5": abs(p - 100) < 0.5,
              "prediction within band": bool(inside.all())}
    failed = [k for k, v in checks.items() if not v]
    en, pn = noisy.chain.mean
    detail = (
        f"noise-free e={e:.5f} p={p:.4f}; 0.1% noise e={en:.4f} p={pn:.3f}; "
        f"points within +-sd over (1e4,6e4]: phi {inside[:, 0].mean():.0%}, chi {inside[:, 1].mean():.0%}"
        + (f"; unmet: {', '.join(failed)}" if failed else "")
    )
    _report(request, 6, not failed, detail)


# 7 ===========================================================================
def _kernel_fd():
    k, h = SEKernel(1.3, 0.7), 1e-5
    t, s = np.array([0.1, 0.5, 1.9]), np.array([0.3, 0.2, 1.0])
    d1 = (k(t + h, s) - k(t - h, s)) / (2 * h)
    d12 = (k.dt(t, s + h) - k.dt(t, s - h)) / (2 * h)
    return max(np.abs(d1 - k.dt(t, s)).max(), np.abs(d12 - k.dt_dt2(t, s)).max()) < 1e-8


def _block_inverse():
    r = np.random.default_rng(1)
    ok = True
    for K in (5, 12, 20):
        t = np.sort(r.uniform(0, 4, K))
        m = GPStateModel(SEKernel(1.0, 0.9), 1e-2, t, r.standard_normal(K)).condition(1e-2)
        full = np.linalg.inv(m.blocks.joint())
        ok &= np.allclose(m.Rdd, full[:K, :K], rtol=1e-6, atol=1e-8 * np.abs(full[:K, :K]).max())
    return ok


def _rearrangement():
    t = np.linspace(0, 6, 50)
    u = np.cos(t)
    m = GPStateModel(SEKernel(1.0, 1.0), 1e-4, t, u).condition()
    lhs, rhs = m.Rdd @ m.d_hat, -m.Rdu @ u
    return np.linalg.norm(lhs - rhs) <= 1e-8 * np.linalg.norm(rhs)


def _map_gradient():
    r = np.random.default_rng(2)
    G, d = r.standard_normal((40, 3)), r.standard_normal(40)
    A = r.standard_normal((40, 40))
    R = A @ A.T + 40 * np.eye(40)
    post = il.posterior(G, R, d, 0.5)
    return np.linalg.norm(il.map_gradient(post.mean, G, R, d, 0.5)) <= 1e-8 * np.linalg.norm(G.T @ R @ d)


def _mh_calibration():
    target = lambda th: -0.5 * ((th[0] - 1.0) / 2.0) ** 2
    ch = mc.run_chain(np.zeros(1), target, steps=60_000, burn_in=5_000, seed=3, thin=25)
    return scipy.stats.kstest(ch.samples[:, 0], "norm", args=(1.0, 2.0)).pvalue > 1e-3


def _euler_order():
    spec = dynamics.SystemSpec("decay", 1, lambda x, th: -x, (0,), jac=lambda x, th: -np.ones(np.shape(x) + (1,)))
    err = [abs(dynamics.implicit_euler(spec, np.zeros(0), [1.0], (0, 1), dt)[1][-1, 0] - np.exp(-1))
           for dt in (0.02, 0.01)]
    return 1.8 <= err[0] / err[1] <= 2.2


def _lv_drift():
    spec = dynamics.lotka_volterra()
    th = spec.truth_flat
    _, x = dynamics.implicit_euler(spec, th, [1.0, 1.0], (0.0, 20.0), 1e-3)
    H = dynamics.lv_first_integral(x, th)
    return float(np.abs(H - H[0]).max())


def test_criterion_7_invariants(request):
    checks = {
        "kernel FD": _kernel_fd(),
        "block inverse K<=20": _block_inverse(),
        "Rdd d = -Rdu u": _rearrangement(),
        "MAP gradient": _map_gradient(),
        "MH calibration": _mh_calibration(),
        "implicit-Euler order": _euler_order(),
    }
    drift = _lv_drift()
    checks["LV drift < 1e-3 (implicit Euler, dt 1e-3)"] = drift < 1e-3
    elapsed = time.perf_counter() - request.config.gpdyn_t0
    checks["suite runtime < 600 s"] = elapsed < 600
    failed = [k for k, v in checks.items() if not v]
    detail = (
        f"{sum(checks.values())}/{len(checks)} green; LV first-integral drift {drift:.3f}; "
        f"suite runtime so far {elapsed:.0f}s"
        + (f"; unmet: {', '.join(failed)}" if failed else "")
    )
    _report(request, 7, not failed, detail)
