"""Closed-form posteriors for right-hand sides that are linear in their parameters.

With ``f_i(x; theta) = g_i(x) . theta`` and the GP derivative estimate
``d_hat`` weighted by ``Rdd`` the posterior of ``theta`` is Gaussian::

    Sigma = (G^T Rdd G + Lambda)^-1
    mu    = Sigma G^T Rdd d_hat

``Lambda`` is the diagonal prior precision.  Sparse identification first
selects active dictionary terms with sequential-threshold ridge regression,
then gives active and pruned terms very different prior precisions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import AllTermsPruned, IndexMapMismatch, NonFiniteTerm, SingularSystem, ZeroTruthNorm

__all__ = [
    "Term",
    "Dictionary",
    "GaussianPosterior",
    "SparsityPattern",
    "monomial",
    "polynomial_dictionary",
    "lv_case_a_dictionaries",
    "lv_case_b_dictionaries",
    "design_matrix",
    "posterior",
    "stridge",
    "sparse_posterior",
    "joint_posterior",
    "metrics_eps",
    "map_objective",
    "map_gradient",
]


# Dictionaries ================================================================
@dataclass(frozen=True)
class Term:
    """One candidate function ``g(x)``; ``grad`` is optional (used by implicit solvers)."""

    name: str
    func: Callable
    grad: Optional[Callable] = None

    def __call__(self, x):
        return self.func(x)


def monomial(powers, names=None):
    """Term ``prod_j x_j ** powers[j]``, with an analytic gradient."""
    powers = tuple(int(p) for p in powers)
    N = len(powers)
    names = names or [f"x{j + 1}" for j in range(N)]
    parts = []
    for n, p in zip(names, powers):
        if p == 1:
            parts.append(n)
        elif p > 1:
            parts.append(f"{n}^{p}")
    label = "*".join(parts) if parts else "1"

    def func(x):
        x = np.asarray(x, dtype=float)
        out = np.ones(x.shape[:-1])
        for j, p in enumerate(powers):
            if p:
                out = out * x[..., j] ** p
        return out

    def grad(x):
        x = np.asarray(x, dtype=float)
        g = np.zeros(x.shape)
        for j, p in enumerate(powers):
            if p == 0:
                continue
            part = p * x[..., j] ** (p - 1)
            for k, q in enumerate(powers):
                if k != j and q:
                    part = part * x[..., k] ** q
            g[..., j] = part
        return g

    return Term(label, func, grad)


@dataclass(frozen=True)
class Dictionary:
    """Ordered candidate terms ``g_i1 .. g_ip`` acting on N-dimensional states."""

    terms: tuple
    arity: int

    def __post_init__(self):
        names = [t.name for t in self.terms]
        if len(set(names)) != len(names):
            raise ValueError(f"term names must be unique: {names}")

    @property
    def p(self):
        return len(self.terms)

    @property
    def names(self):
        return [t.name for t in self.terms]

    def evaluate(self, x):
        """Stacked term values, shape ``x.shape[:-1] + (p,)``."""
        x = np.asarray(x, dtype=float)
        return np.stack([np.broadcast_to(t(x), x.shape[:-1]) for t in self.terms], axis=-1)

    def gradient(self, x):
        """Term gradients ``(..., p, N)`` or ``None`` if some term has none."""
        if any(t.grad is None for t in self.terms):
            return None
        return np.stack([t.grad(x) for t in self.terms], axis=-2)

    def subset(self, index):
        return Dictionary(tuple(self.terms[i] for i in index), self.arity)


def polynomial_dictionary(arity, degree, names=None):
    """All monomials up to ``degree``, ordered by degree then variable index.

    For two states and degree 2: ``1, x1, x2, x1^2, x1*x2, x2^2``.
    """
    terms = []
    for deg in range(degree + 1):
        for combo in combinations_with_replacement(range(arity), deg):
            powers = [0] * arity
            for j in combo:
                powers[j] += 1
            terms.append(monomial(powers, names))
    return Dictionary(tuple(terms), arity)


def lv_case_a_dictionaries():
    """Known-structure Lotka-Volterra terms: ``[x1, x1 x2]`` and ``[x1 x2, x2]``.

    The matching true parameters are ``(alpha, -beta)`` and ``(delta, -gamma)``.
    """
    x1, x2, x12 = monomial((1, 0)), monomial((0, 1)), monomial((1, 1))
    return Dictionary((x1, x12), 2), Dictionary((x12, x2), 2)


def lv_case_b_dictionaries():
    """Six candidate terms ``[1, x1, x2, x1^2, x2^2, x1 x2]`` for both equations."""
    terms = tuple(monomial(p) for p in [(0, 0), (1, 0), (0, 1), (2, 0), (0, 2), (1, 1)])
    d = Dictionary(terms, 2)
    return d, d


def lv_truth(case, alpha=1.5, beta=1.0, delta=1.0, gamma=3.0):
    """Ground-truth coefficient vectors for the LV dictionaries above."""
    if case == "a":
        return np.array([alpha, -beta]), np.array([delta, -gamma])
    if case == "b":
        return (
            np.array([0.0, alpha, 0.0, 0.0, 0.0, -beta]),
            np.array([0.0, 0.0, -gamma, 0.0, 0.0, delta]),
        )
    raise ValueError(case)


def design_matrix(dictionary, states):
    """``G[k, j] = g_j(states[k])``.

    Raises
    ------
    NonFiniteTerm
        With the offending term name and row.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if states.shape[1] != dictionary.arity:
        raise ValueError(f"states have {states.shape[1]} columns, dictionary expects {dictionary.arity}")
    G = dictionary.evaluate(states)
    bad = ~np.isfinite(G)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise NonFiniteTerm(dictionary.terms[col].name, int(row))
    return G


# Posterior ===================================================================
@dataclass
class GaussianPosterior:
    """``N(mean, covariance)`` over one equation's (or a joint) parameter vector."""

    mean: np.ndarray
    covariance: np.ndarray
    term_names: list = field(default_factory=list)
    lambda_active: Optional[float] = None
    lambda_sparse: Optional[float] = None
    active: Optional[list] = None

    @property
    def sd(self):
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def to_dict(self, eps1=None, eps2=None):
        return {
            "term_names": list(self.term_names),
            "mean": np.asarray(self.mean).tolist(),
            "covariance": np.asarray(self.covariance).tolist(),
            "lambda_active": self.lambda_active,
            "lambda_sparse": self.lambda_sparse,
            "active": None if self.active is None else [int(a) for a in self.active],
            "eps1": eps1,
            "eps2": eps2,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            mean=np.asarray(d["mean"], dtype=float),
            covariance=np.asarray(d["covariance"], dtype=float),
            term_names=list(d.get("term_names", [])),
            lambda_active=d.get("lambda_active"),
            lambda_sparse=d.get("lambda_sparse"),
            active=d.get("active"),
        )

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)


def stack_posteriors(posteriors):
    """Independent per-equation posteriors as one block-diagonal Gaussian."""
    mean = np.concatenate([p.mean for p in posteriors])
    cov = scipy.linalg.block_diag(*[p.covariance for p in posteriors])
    names = []
    for i, p in enumerate(posteriors):
        names += [f"eq{i + 1}:{n}" for n in p.term_names] if p.term_names else [f"eq{i + 1}:{j}" for j in range(p.mean.size)]
    return GaussianPosterior(mean, cov, names)


def _as_lambda(Lambda, p):
    if Lambda is None:
        return np.zeros(p)
    lam = np.asarray(Lambda, dtype=float)
    if lam.ndim == 0:
        return np.full(p, float(lam))
    if lam.ndim == 2:
        lam = np.diag(lam)
    if lam.shape != (p,):
        raise ValueError(f"Lambda must have {p} diagonal entries")
    if np.any(lam < 0):
        raise ValueError("Lambda entries must be non-negative")
    return lam


def _solve_normal(A, b, lam, names=None):
    A = 0.5 * (A + A.T)
    try:
        cf = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
        d = np.diag(cf[0])
        if not np.all(np.isfinite(d)) or d.min() <= 1e-10 * d.max():
            raise np.linalg.LinAlgError("numerically singular")
    except np.linalg.LinAlgError as exc:
        hint = " (Lambda = 0: add regularisation or more data)" if not np.any(lam) else ""
        raise SingularSystem(f"normal matrix is not positive definite{hint}") from exc
    mean = scipy.linalg.cho_solve(cf, b, check_finite=False)
    cov = scipy.linalg.cho_solve(cf, np.eye(A.shape[0]), check_finite=False)
    return mean, 0.5 * (cov + cov.T)


def posterior(G, Rdd, d_hat, Lambda=None, term_names=None):
    """Gaussian posterior for ``d_hat ~ G theta`` weighted by ``Rdd``.

    Parameters
    ----------
    G : (K, p) array
    Rdd : (K, K) array
    d_hat : (K,) array
    Lambda : float, (p,) array or (p, p) diagonal matrix, optional
        Prior precision; default 0 (uninformative).

    Raises
    ------
    SingularSystem
        ``G^T Rdd G + Lambda`` is not numerically positive definite.
    """
    G = np.asarray(G, dtype=float)
    lam = _as_lambda(Lambda, G.shape[1])
    RG = Rdd @ G
    A = G.T @ RG + np.diag(lam)
    b = RG.T @ d_hat
    mean, cov = _solve_normal(A, b, lam)
    return GaussianPosterior(mean, cov, list(term_names) if term_names is not None else [])


def map_objective(theta, G, Rdd, d_hat, Lambda=None):
    """``||G theta - d_hat||^2_Rdd + ||theta||^2_Lambda``."""
    lam = _as_lambda(Lambda, G.shape[1])
    r = G @ theta - d_hat
    return float(r @ Rdd @ r + theta @ (lam * theta))


def map_gradient(theta, G, Rdd, d_hat, Lambda=None):
    lam = _as_lambda(Lambda, G.shape[1])
    return 2.0 * (G.T @ (Rdd @ (G @ theta - d_hat)) + lam * theta)


# Sparse identification =======================================================
@dataclass(frozen=True)
class SparsityPattern:
    """Active dictionary terms and the two prior precisions."""

    active: tuple
    p: int
    lambda_active: float = 1e-7
    lambda_sparse: float = 1e7

    def __post_init__(self):
        if not all(0 <= a < self.p for a in self.active):
            raise ValueError("active indices out of range")
        if not (self.lambda_sparse > 1.0 > self.lambda_active > 0.0):
            raise ValueError("need lambda_sparse > 1 > lambda_active > 0")

    @property
    def sparse(self):
        return tuple(j for j in range(self.p) if j not in self.active)

    def lambdas(self):
        lam = np.full(self.p, self.lambda_sparse)
        lam[list(self.active)] = self.lambda_active
        return lam

    def with_lambdas(self, lambda_active, lambda_sparse):
        return SparsityPattern(self.active, self.p, lambda_active, lambda_sparse)


def stridge(G, d_hat, threshold=0.1, max_iter=20, ridge=1.0, lambda_active=1e-7, lambda_sparse=1e7):
    """Sequential-threshold ridge regression.

    Repeatedly solves ``min ||G theta - d_hat||^2 + ridge ||theta||^2`` on
    the active columns and drops coefficients smaller than ``threshold``
    in magnitude, until the active set stops changing.

    Returns
    -------
    SparsityPattern

    Raises
    ------
    AllTermsPruned
    """
    G = np.asarray(G, dtype=float)
    d_hat = np.asarray(d_hat, dtype=float)
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    p = G.shape[1]
    active = np.arange(p)
    for _ in range(max(1, max_iter)):
        Ga = G[:, active]
        coef = np.linalg.solve(Ga.T @ Ga + ridge * np.eye(active.size), Ga.T @ d_hat)
        keep = np.abs(coef) >= threshold
        if not keep.any():
            raise AllTermsPruned(f"no term survives threshold {threshold:g}")
        if keep.all():
            break
        active = active[keep]
    return SparsityPattern(tuple(int(a) for a in active), p, lambda_active, lambda_sparse)


def sparse_posterior(G, Rdd, d_hat, pattern, term_names=None):
    """Posterior with ``lambda_active`` on active terms and ``lambda_sparse`` on the rest.

    All ``p`` terms stay in the result.
    """
    post = posterior(G, Rdd, d_hat, pattern.lambdas(), term_names)
    post.lambda_active = pattern.lambda_active
    post.lambda_sparse = pattern.lambda_sparse
    post.active = list(pattern.active)
    return post


# Joint / multi-trajectory ====================================================
def joint_posterior(blocks, Lambda_union=None, n_params=None, term_names=None):
    """Posterior over a union parameter vector from several likelihood blocks.

    Parameters
    ----------
    blocks : sequence of (G, Rdd, d_hat, index_map)
        ``index_map[j]`` is the position in the union vector of column ``j``
        of ``G``.  One block per equation (shared parameters) or per
        trajectory (several initial conditions), or both.
    Lambda_union : prior precision over the union vector.
    n_params : int, optional
        Length of the union vector (default: inferred from the index maps).
    """
    blocks = list(blocks)
    if not blocks:
        raise IndexMapMismatch("need at least one block")
    maps = []
    for G, Rdd, d_hat, imap in blocks:
        imap = np.asarray(imap, dtype=int)
        G = np.asarray(G)
        if imap.ndim != 1 or imap.size != G.shape[1]:
            raise IndexMapMismatch(f"index map of length {imap.size} for a design with {G.shape[1]} columns")
        if np.unique(imap).size != imap.size or imap.min() < 0:
            raise IndexMapMismatch("index map entries must be distinct and non-negative")
        if Rdd.shape != (G.shape[0], G.shape[0]) or np.shape(d_hat) != (G.shape[0],):
            raise IndexMapMismatch("Rdd/d_hat do not match the design rows")
        maps.append(imap)
    P = int(max(m.max() for m in maps) + 1) if n_params is None else int(n_params)
    if any(m.max() >= P for m in maps):
        raise IndexMapMismatch("index map exceeds the union parameter length")
    covered = np.zeros(P, dtype=bool)
    A = np.zeros((P, P))
    b = np.zeros(P)
    for (G, Rdd, d_hat, _), imap in zip(blocks, maps):
        RG = Rdd @ G
        A[np.ix_(imap, imap)] += G.T @ RG
        b[imap] += RG.T @ d_hat
        covered[imap] = True
    lam = _as_lambda(Lambda_union, P)
    if not covered.all() and not np.all(lam[~covered] > 0):
        raise IndexMapMismatch("some union parameters appear in no block and have no prior")
    A += np.diag(lam)
    mean, cov = _solve_normal(A, b, lam)
    return GaussianPosterior(mean, cov, list(term_names) if term_names is not None else [])


# Metrics =====================================================================
def metrics_eps(posteriors, truth):
    """Relative error of posterior means and relative posterior spread, in percent.

    ``eps1 = 100 sqrt(sum ||theta* - mu||^2 / sum ||theta*||^2)``
    ``eps2 = 100 sqrt(sum tr(Sigma) / sum ||theta*||^2)``
    """
    posteriors = list(posteriors)
    truth = [np.asarray(t, dtype=float) for t in truth]
    if len(posteriors) != len(truth):
        raise ValueError("one truth vector per posterior")
    num1 = num2 = den = 0.0
    for post, t in zip(posteriors, truth):
        if np.shape(post.mean) != t.shape:
            raise ValueError(f"posterior mean shape {np.shape(post.mean)} != truth shape {t.shape}")
        num1 += float(np.sum((t - post.mean) ** 2))
        num2 += float(np.trace(np.atleast_2d(post.covariance)))
        den += float(np.sum(t**2))
    if den == 0:
        raise ZeroTruthNorm("ground-truth parameters have zero norm")
    return 100.0 * np.sqrt(num1 / den), 100.0 * np.sqrt(num2 / den)
