"""End-to-end recipes shared by the command line and the benchmark sweeps.

Each ``fit_*`` function takes observed ``times``/``values`` only; clean
values never reach inference.  Results carry the fitted GP models so that
hyperparameters and ``chi_d`` escalations can be logged.
"""

from __future__ import annotations

import logging
import time
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import dataio, dynamics
from . import inference_linear as il
from . import inference_mcmc as mc
from .gp import GPStateModel

log = logging.getLogger(__name__)

__all__ = [
    "stage_seed",
    "fit_states",
    "AffineResult",
    "ChainResult",
    "fit_affine",
    "fit_baseline",
    "fit_network",
    "fit_shared",
    "dictionaries_for",
    "predict_affine",
    "predict_network",
    "predict_shared",
]


def stage_seed(root, stage):
    """Deterministic per-stage seed derived from the root seed and a stage name."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1)[0])


def fit_states(times, values, restarts=8, seed=0, chi_d_init=None, screen_size=400):
    """One conditioned :class:`GPStateModel` per state column."""
    values = np.atleast_2d(np.asarray(values, dtype=float).T).T
    return [
        GPStateModel.fit(times, values[:, j], restarts=restarts, seed=stage_seed(seed, f"gp{j}"),
                         chi_d_init=chi_d_init, screen_size=screen_size)
        for j in range(values.shape[1])
    ]


def smoothed_states(models):
    return np.column_stack([m.u_hat for m in models])


def _gp_log(models):
    return [
        {
            "variance": m.kernel.variance,
            "lengthscale": m.kernel.lengthscale,
            "chi_u": m.chi_u,
            "chi_d": m.chi_d,
            "chi_d_escalations": m.chi_d_escalations,
            "jitter": m.jitter,
            "log_marginal_likelihood": m.log_marginal_likelihood(),
        }
        for m in models
    ]


# Affine (closed form) ========================================================
DICTIONARIES = {
    ("lotka-volterra", "case-a"): (il.lv_case_a_dictionaries, lambda: il.lv_truth("a")),
    ("lotka-volterra", "case-b"): (il.lv_case_b_dictionaries, lambda: il.lv_truth("b")),
}


def dictionaries_for(system, scenario):
    """Registered ``(dictionaries, truth)`` for an affine scenario."""
    try:
        make, truth = DICTIONARIES[(system, scenario)]
    except KeyError:
        raise ValueError(f"no dictionaries registered for {system!r} / {scenario!r}") from None
    return make(), truth()


@dataclass
class AffineResult:
    posteriors: list
    models: list
    patterns: Optional[list] = None
    eps: Optional[tuple] = None
    runtime: float = 0.0
    dictionaries: tuple = ()

    def log(self):
        return {
            "gp": _gp_log(self.models),
            "active": None if self.patterns is None else [list(p.active) for p in self.patterns],
            "eps1": None if self.eps is None else self.eps[0],
            "eps2": None if self.eps is None else self.eps[1],
            "runtime_s": self.runtime,
        }


def fit_affine(
    times,
    values,
    dictionaries,
    scenario="case-a",
    truth=None,
    restarts=8,
    seed=0,
    chi_d_init=None,
    prior_precision=0.0,
    threshold=0.1,
    lambda_active=1e-7,
    lambda_sparse=1e7,
    models=None,
    trajectories=None,
):
    """GP emulation followed by the closed-form posterior of every equation.

    ``scenario`` is ``"case-a"`` (known structure, prior precision
    ``prior_precision``) or ``"case-b"`` (STRidge selection, then sparse
    prior).  Pass ``models`` to reuse already fitted GPs.  Several
    trajectories (``[(times, values), ...]``) each get their own GPs and
    their likelihood blocks are summed.
    """
    t0 = time.perf_counter()
    if trajectories is None:
        trajectories = [(times, values)]
        model_sets = [models] if models is not None else [None]
    else:
        model_sets = models if models is not None else [None] * len(trajectories)
    model_sets = [
        ms if ms is not None else fit_states(t, v, restarts=restarts, seed=stage_seed(seed, f"traj{k}") if k else seed, chi_d_init=chi_d_init)
        for k, ((t, v), ms) in enumerate(zip(trajectories, model_sets))
    ]
    designs = [[il.design_matrix(d, smoothed_states(ms)) for d in dictionaries] for ms in model_sets]
    posteriors, patterns = [], []
    for i, d in enumerate(dictionaries):
        blocks = [(designs[k][i], ms[i].Rdd, ms[i].d_hat, np.arange(d.p)) for k, ms in enumerate(model_sets)]
        if scenario == "case-a":
            lam = prior_precision
        elif scenario == "case-b":
            G_all = np.vstack([b[0] for b in blocks])
            d_all = np.concatenate([b[2] for b in blocks])
            pat = il.stridge(G_all, d_all, threshold=threshold, lambda_active=lambda_active, lambda_sparse=lambda_sparse)
            patterns.append(pat)
            lam = pat.lambdas()
        else:
            raise ValueError(f"unknown affine scenario {scenario!r}")
        if len(blocks) == 1:
            post = il.posterior(blocks[0][0], blocks[0][1], blocks[0][2], lam, d.names)
        else:
            post = il.joint_posterior(blocks, lam, n_params=d.p, term_names=d.names)
        if scenario == "case-b":
            post.lambda_active, post.lambda_sparse, post.active = lambda_active, lambda_sparse, list(pat.active)
        posteriors.append(post)
    eps = il.metrics_eps(posteriors, truth) if truth is not None else None
    flat_models = model_sets[0] if len(model_sets) == 1 else [m for ms in model_sets for m in ms]
    return AffineResult(posteriors, flat_models, patterns or None, eps, time.perf_counter() - t0, tuple(dictionaries))


def fit_baseline(times, values, dictionaries, truth=None, smooth=True, window=11, poly_order=3):
    """Finite differences plus ordinary least squares.

    Noisy data are Savitzky-Golay smoothed first.  The filter runs in
    sample-index space because subsampled grids are not uniform.
    """
    Z = np.asarray(values, dtype=float)
    if smooth:
        w = min(window, Z.shape[0] - (1 - Z.shape[0] % 2))
        if w > poly_order:
            Z = dataio.savitzky_golay(Z, w, poly_order)
    D = dataio.finite_difference_derivatives(times, Z)
    thetas = [dataio.baseline_linreg(il.design_matrix(d, Z), D[:, i]) for i, d in enumerate(dictionaries)]
    eps1 = None
    if truth is not None:
        points = [il.GaussianPosterior(t, np.zeros((t.size, t.size))) for t in thetas]
        eps1 = il.metrics_eps(points, truth)[0]
    return thetas, eps1


def predict_affine(dictionaries, posteriors, x0, t_eval, draws=100, seed=0, method="implicit-euler", dt=1e-3):
    """Ensemble prediction for a stacked per-equation Gaussian posterior."""
    system = dynamics.affine_system(dictionaries)
    joint = il.stack_posteriors(posteriors)
    return dynamics.ensemble_predict(system, joint, x0, t_eval, draws=draws, seed=seed, method=method, dt=dt)


# Network + MCMC ==============================================================
@dataclass
class ChainResult:
    chain: mc.SampleChain
    models: list
    theta_map: np.ndarray
    runtime: float = 0.0
    net: Optional[mc.ShallowNet] = None
    extra: dict = field(default_factory=dict)

    def log(self):
        return {
            "gp": _gp_log(self.models),
            "theta_map": self.theta_map.tolist(),
            "acceptance_rate": self.chain.acceptance_rate,
            "proposal_scale": self.chain.proposal_scale,
            "runtime_s": self.runtime,
            **self.extra,
        }


def _sample(residual, init, seed, steps, burn_in, thin, bounds=None):
    theta_map, J = mc.map_estimate(residual, init, bounds=bounds)
    cov = mc.gauss_newton_covariance(J)
    chain = mc.run_chain(theta_map, residual.log_posterior, steps=steps, burn_in=burn_in, seed=seed, thin=thin, cov=cov)
    return theta_map, chain


def fit_network(
    trajectories,
    hidden=8,
    lam=0.01,
    steps=50_000,
    burn_in=10_000,
    thin=10,
    init_draws=16,
    restarts=8,
    seed=0,
    chi_d_init=None,
):
    """Shallow-network right-hand side for a scalar state, sampled by MH.

    Parameters
    ----------
    trajectories : list of (times, values)
        One GP per trajectory; their likelihood blocks are summed.
    """
    t0 = time.perf_counter()
    net = mc.ShallowNet(1, hidden)
    models, blocks, jacs = [], [], []
    for k, (t, v) in enumerate(trajectories):
        (m,) = fit_states(t, np.reshape(v, (-1, 1)), restarts=restarts, seed=stage_seed(seed, f"traj{k}"), chi_d_init=chi_d_init)
        X = m.u_hat[:, None]
        models.append(m)
        blocks.append((lambda th, X=X: net(th, X), m.Rdd, m.d_hat))
        jacs.append(lambda th, X=X: net.jacobian(th, X))
    R = mc.WhitenedResidual(blocks, lam, net.n_params, jacobians=jacs)
    init = mc.best_prior_draw(R.log_posterior, net.n_params, lam, draws=init_draws, seed=stage_seed(seed, "init"))
    theta_map, chain = _sample(R, init, stage_seed(seed, "mcmc"), steps, burn_in, thin)
    chain.param_names = [f"W{l + 1}" for l in range(hidden)] + [f"b{l + 1}" for l in range(hidden)] + [f"v{l + 1}" for l in range(hidden)]
    return ChainResult(chain, models, theta_map, time.perf_counter() - t0, net)


def predict_network(net, chain, x0, t_eval, draws=100, seed=0, rtol=1e-8, atol=1e-10):
    return dynamics.ensemble_predict(net.as_system(), chain, np.atleast_1d(x0), t_eval, draws=draws, seed=seed,
                                     method="adaptive-rk", rtol=rtol, atol=atol)


# Shared parameters ===========================================================
def fit_shared(
    times,
    values,
    spec,
    lam=1e-8,
    steps=50_000,
    burn_in=10_000,
    thin=10,
    init_box=((0.0, 0.9), (10.0, 200.0)),
    init_draws=16,
    restarts=8,
    seed=0,
    chi_d_init=None,
    support=None,
    bounds=None,
):
    """Joint posterior of a parameter vector shared by all equations of ``spec``.

    The chain starts from the best of ``init_draws`` uniform draws in
    ``init_box`` polished to the posterior mode.
    """
    t0 = time.perf_counter()
    models = fit_states(times, values, restarts=restarts, seed=seed, chi_d_init=chi_d_init)
    X = smoothed_states(models)
    blocks = [(lambda th, i=i: spec.rhs(X, np.asarray(th))[:, i], m.Rdd, m.d_hat) for i, m in enumerate(models)]
    P = spec.n_params
    R = mc.WhitenedResidual(blocks, lam, P, support=support)
    rng = np.random.default_rng(stage_seed(seed, "init"))
    lo, hi = np.array(init_box, dtype=float).T
    cands = rng.uniform(lo, hi, size=(init_draws, P))
    vals = np.array([R.log_posterior(c) for c in cands])
    if not np.any(np.isfinite(vals)):
        raise mc.NonFiniteInit("no initial draw has a finite log-posterior")
    init = cands[int(np.argmax(vals))]
    theta_map, chain = _sample(R, init, stage_seed(seed, "mcmc"), steps, burn_in, thin, bounds=bounds)
    chain.param_names = list(spec.param_names) if getattr(spec, "param_names", None) else [f"theta_{j + 1}" for j in range(P)]
    return ChainResult(chain, models, theta_map, time.perf_counter() - t0)


def fit_black_hole(times, values, seed=0, **kwargs):
    spec = dynamics.black_hole()
    kwargs.setdefault("support", dynamics.blackhole_support)
    kwargs.setdefault("bounds", ([0.0, 8.0], [0.999, 1e4]))
    res = fit_shared(times, values, spec, seed=seed, **kwargs)
    res.chain.param_names = ["e", "p"]
    return res


def predict_shared(spec, chain, x0, t_eval, draws=100, seed=0, rtol=1e-10, atol=1e-10):
    return dynamics.ensemble_predict(spec, chain, x0, t_eval, draws=draws, seed=seed, method="adaptive-rk", rtol=rtol, atol=atol)
