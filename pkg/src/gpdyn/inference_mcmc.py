"""Sampling-based posteriors for right-hand sides that are nonlinear in theta.

The log-posterior is ``-1/2 (sum_i ||f_i(X; theta) - d_hat_i||^2_Rdd_i + lam ||theta||^2)``
up to a constant.  Writing ``Rdd = L L^T`` turns it into ``-1/2 ||res(theta)||^2``
with a whitened residual, which lets a least-squares solver find the mode
and a Gauss-Newton curvature that shapes the random-walk proposal.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg
import scipy.optimize

from .dynamics import SystemSpec
from .errors import NonFiniteInit, ShapeMismatch

__all__ = [
    "ShallowNet",
    "SampleChain",
    "WhitenedResidual",
    "log_posterior",
    "run_chain",
    "map_estimate",
    "gauss_newton_covariance",
    "posterior_f_band",
    "best_prior_draw",
]


# Network =====================================================================
@dataclass(frozen=True)
class ShallowNet:
    """``f(x) = sum_l v_l tanh(w_l . x + b_l)`` with ``L`` hidden units.

    Parameters are flattened as ``[W (L x N, row-major), b (L), v (L)]``.
    """

    input_dim: int
    hidden: int = 8

    @property
    def n_params(self):
        return self.hidden * (self.input_dim + 2)

    def unflatten(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape[-1] != self.n_params:
            raise ShapeMismatch(f"expected {self.n_params} parameters, got {theta.shape[-1]}")
        L, N = self.hidden, self.input_dim
        W = theta[..., : L * N].reshape(theta.shape[:-1] + (L, N))
        b = theta[..., L * N : L * N + L]
        v = theta[..., L * N + L :]
        return W, b, v

    def flatten(self, W, b, v):
        W, b, v = (np.asarray(a, dtype=float) for a in (W, b, v))
        lead = W.shape[:-2]
        return np.concatenate([W.reshape(lead + (-1,)), b, v], axis=-1)

    def __call__(self, theta, x):
        """Network output.

        ``theta`` of shape ``(P,)`` with ``x`` of shape ``(M, N)`` gives ``(M,)``;
        ``(S, P)`` with ``(M, N)`` gives ``(S, M)``; ``(D, P)`` with ``(D, N)``
        pairs rows when ``pairwise=True`` via :meth:`pairwise`.
        """
        W, b, v = self.unflatten(theta)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[-1] != self.input_dim:
            raise ShapeMismatch(f"states have {x.shape[-1]} columns, network expects {self.input_dim}")
        # (..., L, N) x (M, N) -> (..., M, L)
        pre = np.einsum("...ln,mn->...ml", W, x) + b[..., None, :]
        return np.einsum("...ml,...l->...m", np.tanh(pre), v)

    def pairwise(self, theta, x):
        """Evaluate member ``d`` of ``theta (D, P)`` at state ``x[d]``; returns ``(D,)``."""
        W, b, v = self.unflatten(theta)
        pre = np.einsum("...ln,...n->...l", W, x) + b
        return np.sum(np.tanh(pre) * v, axis=-1)

    def jacobian(self, theta, x):
        """``d f(x_m) / d theta``, shape ``(M, P)``."""
        W, b, v = self.unflatten(theta)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        h = np.tanh(x @ W.T + b)  # (M, L)
        g = (1.0 - h**2) * v  # d f / d pre
        dW = g[:, :, None] * x[:, None, :]
        return np.concatenate([dW.reshape(x.shape[0], -1), g, h], axis=1)

    def as_system(self, name="shallow-net"):
        """One-state ODE ``dx/dt = f(x; theta)`` usable by the integrators."""
        if self.input_dim != 1:
            raise ValueError("as_system supports scalar states only")

        def rhs(x, theta):
            theta = np.asarray(theta, dtype=float)
            if theta.ndim == 1:
                return self(theta, np.reshape(x, (-1, 1))).reshape(np.shape(x))
            return self.pairwise(theta, x)[..., None]

        def jac(x, theta):
            W, b, v = self.unflatten(theta)
            pre = np.einsum("...ln,...n->...l", W, x) + b
            g = (1.0 - np.tanh(pre) ** 2) * v
            return np.einsum("...l,...ln->...n", g, W)[..., None, :]

        return SystemSpec(name=name, state_dim=1, rhs=rhs, theta_dim=(self.n_params,), jac=jac, state_names=("x",))


# Log-posterior ===============================================================
def log_posterior(theta, net, states, Rdd, d_hat, lam):
    """``-1/2 (r^T Rdd r + lam ||theta||^2)`` with ``r = net(states; theta) - d_hat``."""
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1 or theta.size != net.n_params:
        raise ShapeMismatch(f"theta must have shape ({net.n_params},), got {theta.shape}")
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if states.shape[0] != np.shape(d_hat)[0] or np.shape(Rdd) != (states.shape[0],) * 2:
        raise ShapeMismatch("states, Rdd and d_hat disagree on the number of instances")
    r = net(theta, states) - d_hat
    return -0.5 * (float(r @ Rdd @ r) + lam * float(theta @ theta))


class WhitenedResidual:
    """Stacked whitened residuals of several likelihood blocks plus the prior.

    Parameters
    ----------
    blocks : list of (func, Rdd, d_hat)
        ``func(theta)`` returns the model derivative at the block's
        instances, shape ``(K,)``.  A block is one equation, one trajectory,
        or both.
    lam : float or (P,) array
        Prior precision.
    jacobians : list of callables, optional
        ``jac(theta) -> (K, P)`` per block; finite differences otherwise.
    support : callable, optional
        ``support(theta) -> bool``; the prior is zero where it is False.
    """

    def __init__(self, blocks, lam, n_params, jacobians=None, support=None):
        self.n_params = int(n_params)
        self.funcs, self.d_hats, self.roots = [], [], []
        for func, Rdd, d_hat in blocks:
            Rdd = 0.5 * (np.asarray(Rdd) + np.asarray(Rdd).T)
            self.funcs.append(func)
            self.d_hats.append(np.asarray(d_hat, dtype=float))
            # r^T Rdd r = ||L^T r||^2
            self.roots.append(scipy.linalg.cholesky(Rdd, lower=True).T)
        self.sqrt_lam = np.sqrt(np.broadcast_to(np.asarray(lam, dtype=float), (self.n_params,)))
        self.jacobians = jacobians
        self.support = support

    def __call__(self, theta):
        theta = np.asarray(theta, dtype=float)
        parts = [U @ (f(theta) - d) for f, U, d in zip(self.funcs, self.roots, self.d_hats)]
        parts.append(self.sqrt_lam * theta)
        return np.concatenate(parts)

    def jacobian(self, theta):
        if self.jacobians is None:
            return None
        parts = [U @ J(theta) for J, U in zip(self.jacobians, self.roots)]
        parts.append(np.diag(self.sqrt_lam))
        return np.vstack(parts)

    def log_posterior(self, theta):
        if self.support is not None and not self.support(theta):
            return -np.inf
        with np.errstate(all="ignore"):
            r = self(theta)
        if not np.all(np.isfinite(r)):
            return -np.inf
        return -0.5 * float(r @ r)


def best_prior_draw(target, n_params, lam, draws=16, seed=0):
    """Best of ``draws`` samples from ``N(0, 1/lam)`` by ``target`` value."""
    rng = np.random.default_rng(seed)
    sd = 1.0 / np.sqrt(np.broadcast_to(np.asarray(lam, dtype=float), (n_params,)))
    cands = rng.standard_normal((draws, n_params)) * sd
    vals = np.array([target(c) for c in cands])
    if not np.any(np.isfinite(vals)):
        raise NonFiniteInit(f"none of {draws} prior draws has a finite log-posterior")
    return cands[int(np.nanargmax(np.where(np.isfinite(vals), vals, -np.inf)))]


def map_estimate(residual, init, bounds=None, max_nfev=2000):
    """Posterior mode by nonlinear least squares on the whitened residual.

    Returns the optimum and the stacked residual Jacobian there.
    """
    jac = residual.jacobian if residual.jacobians is not None else "2-point"
    kwargs = {"bounds": bounds} if bounds is not None else {}
    res = scipy.optimize.least_squares(residual, np.asarray(init, dtype=float), jac=jac, method="trf",
                                       x_scale="jac", max_nfev=max_nfev, **kwargs)
    return res.x, np.atleast_2d(res.jac)


def gauss_newton_covariance(J):
    """``(J^T J)^-1``, the Laplace covariance at a least-squares optimum.

    Computed from the triangular factor of ``J`` so that the squared
    condition number of ``J^T J`` is never formed.
    """
    R = scipy.linalg.qr(np.asarray(J, dtype=float), mode="r")[0][: J.shape[1]]
    if np.any(np.abs(np.diag(R)) <= 1e-14 * np.abs(R).max()):
        raise np.linalg.LinAlgError("residual Jacobian is rank deficient")
    Ri = scipy.linalg.solve_triangular(R, np.eye(R.shape[0]))
    cov = Ri @ Ri.T
    return 0.5 * (cov + cov.T)


# Chain =======================================================================
@dataclass
class SampleChain:
    """Post-burn-in, thinned draws of a random-walk Metropolis-Hastings run."""

    samples: np.ndarray
    acceptance_rate: float
    log_posterior_trace: np.ndarray
    proposal_scale: float
    seed: int
    burn_in: int = 0
    steps: int = 0
    thin: int = 1
    param_names: list = field(default_factory=list)

    @property
    def mean(self):
        return self.samples.mean(axis=0)

    @property
    def covariance(self):
        return np.atleast_2d(np.cov(self.samples, rowvar=False))

    @property
    def sd(self):
        return self.samples.std(axis=0, ddof=1)

    def metadata(self):
        return {
            "acceptance_rate": self.acceptance_rate,
            "proposal_scale": self.proposal_scale,
            "seed": self.seed,
            "steps": self.steps,
            "burn_in": self.burn_in,
            "thin": self.thin,
            "shape": list(self.samples.shape),
            "param_names": list(self.param_names),
        }

    def write(self, csv_path, json_path=None, extra=None):
        """One CSV row per retained draw (``log_posterior, theta_1..``) plus JSON metadata."""
        from .dataio import atomic_write

        names = self.param_names or [f"theta_{j + 1}" for j in range(self.samples.shape[1])]
        with atomic_write(csv_path) as fh:
            w = csv.writer(fh)
            w.writerow(["log_posterior", *names])
            for lp, row in zip(self.log_posterior_trace, self.samples):
                w.writerow([repr(float(lp)), *(repr(float(v)) for v in row)])
        if json_path is not None:
            with atomic_write(json_path) as fh:
                json.dump({**self.metadata(), **(extra or {})}, fh, indent=2)

    @classmethod
    def read(cls, csv_path, json_path=None):
        with open(csv_path, newline="") as fh:
            rows = list(csv.reader(fh))
        data = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, len(rows[0]))
        meta = json.loads(open(json_path).read()) if json_path else {}
        return cls(
            samples=data[:, 1:], acceptance_rate=meta.get("acceptance_rate", float("nan")),
            log_posterior_trace=data[:, 0], proposal_scale=meta.get("proposal_scale", float("nan")),
            seed=meta.get("seed", 0), burn_in=meta.get("burn_in", 0), steps=meta.get("steps", 0),
            thin=meta.get("thin", 1), param_names=rows[0][1:],
        )


def run_chain(
    init,
    target,
    steps=50_000,
    burn_in=10_000,
    seed=0,
    thin=10,
    scale=None,
    cov=None,
    target_accept=0.23,
    adapt_every=100,
    adapt=True,
):
    """Gaussian random-walk Metropolis-Hastings.

    Proposals are ``theta + scale * C z`` with ``C C^T = cov`` (identity by
    default).  During burn-in ``scale`` is nudged every ``adapt_every``
    steps toward ``target_accept`` (Robbins-Monro on ``log scale``); it is
    frozen afterwards so the retained draws come from a fixed kernel.

    Parameters
    ----------
    init : (P,) array
    target : callable
        Log-density up to a constant; ``-inf`` rejects.
    steps, burn_in, thin : int
        Total iterations, discarded prefix, and retention stride.
    seed : int
    scale : float, optional
        Initial step; default ``2.38 / sqrt(P)``.
    cov : (P, P) array, optional
        Proposal shape.

    Returns
    -------
    SampleChain
        ``acceptance_rate`` covers the post-burn-in steps.

    Raises
    ------
    NonFiniteInit
    """
    if not (steps > burn_in >= 0):
        raise ValueError("need steps > burn_in >= 0")
    if thin < 1:
        raise ValueError("thin must be >= 1")
    x = np.array(init, dtype=float)
    P = x.size
    lp = float(target(x))
    if not np.isfinite(lp):
        raise NonFiniteInit("target is not finite at the initial point")
    C = np.eye(P) if cov is None else scipy.linalg.cholesky(0.5 * (cov + np.transpose(cov)), lower=True)
    log_s = np.log(2.38 / np.sqrt(P) if scale is None else float(scale))

    rng = np.random.default_rng(seed)
    n_keep = (steps - burn_in) // thin
    samples = np.empty((n_keep, P))
    trace = np.empty(n_keep)
    accepted_window = 0
    accepted_post = 0
    k = 0
    for i in range(steps):
        z = rng.standard_normal(P)
        s = np.exp(log_s)
        y = x + s * (C @ z)
        lq = float(target(y))
        if np.isfinite(lq) and np.log(rng.random()) < lq - lp:
            x, lp = y, lq
            accepted_window += 1
            if i >= burn_in:
                accepted_post += 1
        if i < burn_in and adapt and (i + 1) % adapt_every == 0:
            rate = accepted_window / adapt_every
            # error normalised so that zero acceptance shrinks the step by e per
            # window at first; the diminishing gain settles it late in burn-in
            err = (rate - target_accept) / (target_accept if rate < target_accept else 1.0 - target_accept)
            log_s += err / np.sqrt((i + 1) / adapt_every)
            accepted_window = 0
        if i >= burn_in and (i - burn_in) % thin == thin - 1:
            samples[k] = x
            trace[k] = lp
            k += 1
    return SampleChain(
        samples=samples[:k],
        acceptance_rate=accepted_post / (steps - burn_in),
        log_posterior_trace=trace[:k],
        proposal_scale=float(np.exp(log_s)),
        seed=seed,
        burn_in=burn_in,
        steps=steps,
        thin=thin,
    )


def posterior_f_band(chain, net, query_states, batch=1000):
    """Pointwise mean and sd of ``net(x; theta)`` over the chain's draws."""
    samples = chain.samples if hasattr(chain, "samples") else np.asarray(chain)
    if samples.shape[0] == 0:
        raise ValueError("empty chain")
    q = np.atleast_2d(np.asarray(query_states, dtype=float))
    if q.shape[-1] != net.input_dim:
        q = q.reshape(-1, net.input_dim)
    vals = np.concatenate([net(samples[i : i + batch], q) for i in range(0, samples.shape[0], batch)], axis=0)
    sd = vals.std(axis=0) if samples.shape[0] > 1 else np.zeros(q.shape[0])
    return vals.mean(axis=0), sd
