"""Per-component GP emulation of a sampled trajectory.

For one state component observed as ``u`` on times ``T`` this module
provides

* hyperparameters ``(variance, lengthscale, chi_u)`` by maximising the
  marginal likelihood of ``u``,
* the smoothed states ``u_hat = k(T, T) Kuu^-1 u``,
* the derivative estimate ``d_hat = Kdu Kuu^-1 u``,
* the derivative precision ``Rdd = (Kdd - Kdu Kuu^-1 Kud)^-1``, with the
  derivative noise ``chi_d`` raised until that Schur complement is well
  conditioned.
"""

from __future__ import annotations

import json
import logging
import math

import numpy as np
import scipy.linalg
import scipy.optimize

from .errors import ConditioningFailed, OptimizationFailed
from .kernels import SEKernel, assemble, check_times, jittered_cholesky

__all__ = [
    "GPStateModel",
    "fit_hyperparameters",
    "log_marginal_likelihood",
    "smooth_states",
    "estimate_derivatives",
    "derivative_precision",
]

log = logging.getLogger(__name__)

LOG2PI = math.log(2.0 * math.pi)
COND_MAX = 1e8
CHI_D_FACTOR = 10.0
CHI_D_RATIO_MAX = 1e6

# Restart box, relative to the time span and the data variance.
LENGTHSCALE_BOX = (0.05, 2.0)
VARIANCE_BOX = (0.1, 10.0)
NOISE_BOX = (1e-6, 1e-1)
# Optimiser bounds (wider than the restart box).
LENGTHSCALE_BOUNDS = (1e-3, 1e2)
VARIANCE_BOUNDS = (1e-6, 1e4)
NOISE_BOUNDS = (1e-12, 1e1)
REFINE_MAXFUN = 15


def _data_scale(u):
    v = float(np.var(u))
    if v > 0:
        return v
    m = float(np.mean(np.square(u)))
    return m if m > 0 else 1.0


def log_marginal_likelihood(times, u, kernel, chi_u):
    """``log p(u)`` under the zero-mean GP with white noise ``chi_u``.

    The same Cholesky jitter policy as everywhere else in the package is
    applied, so the value refers to ``Kuu + jitter I``.
    """
    times = check_times(times)
    u = np.asarray(u, dtype=float)
    Kuu = kernel(times[:, None], times[None, :]) + chi_u * np.eye(times.size)
    L, _ = jittered_cholesky(Kuu)
    alpha = scipy.linalg.cho_solve((L, True), u, check_finite=False)
    return float(-0.5 * u @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * u.size * LOG2PI)


def _neg_lml_and_grad(log_params, times, u, sqdist):
    """Negative log marginal likelihood and its gradient in log-space.

    ``log_params = (log variance, log lengthscale, log chi_u)``.
    """
    variance, lengthscale, chi_u = np.exp(log_params)
    K = u.size
    E = np.exp(-0.5 * sqdist / lengthscale**2)
    Kuu = variance * E
    Kuu[np.diag_indices(K)] += chi_u
    try:
        L, _ = jittered_cholesky(Kuu)
    except np.linalg.LinAlgError:
        return 1e25, np.zeros(3)
    alpha = scipy.linalg.cho_solve((L, True), u, check_finite=False)
    nll = 0.5 * u @ alpha + np.sum(np.log(np.diag(L))) + 0.5 * K * LOG2PI
    # Kuu^-1 from the factor (LAPACK potri fills the lower triangle only)
    Kinv, info = scipy.linalg.lapack.dpotri(L, lower=1)
    if info != 0 or not np.isfinite(nll):
        return 1e25, np.zeros(3)
    Kinv = np.tril(Kinv) + np.tril(Kinv, -1).T
    W = np.outer(alpha, alpha) - Kinv
    dK_dvar = variance * E
    grad = np.array(
        [
            0.5 * np.sum(W * dK_dvar),
            0.5 * np.sum(W * dK_dvar * sqdist) / lengthscale**2,
            0.5 * chi_u * np.trace(W),
        ]
    )
    return float(nll), -grad


def fit_hyperparameters(times, u, restarts=8, seed=0, screen_size=400, return_info=False):
    """Maximise ``log p(u)`` over ``(variance, lengthscale, chi_u)``.

    Local L-BFGS-B runs in log-space start from ``restarts`` points drawn
    log-uniformly from a box scaled by the time span and ``var(u)``.  For
    more than ``screen_size`` observations the restarts run on an evenly
    strided subset and only the winner is refined on the full data.

    Parameters
    ----------
    times : (K,) array
    u : (K,) array
    restarts : int
    seed : int or numpy Generator
    screen_size : int or None
        ``None`` disables screening.
    return_info : bool
        Also return a dict with the optimum objective and per-restart values.

    Returns
    -------
    kernel : SEKernel
    chi_u : float
    info : dict, only if ``return_info``
    """
    times = check_times(times, min_len=3)
    u = np.asarray(u, dtype=float)
    if u.shape != times.shape or not np.all(np.isfinite(u)):
        raise ValueError("u must be finite and match times")
    if restarts < 1:
        raise ValueError("need at least one restart")
    rng = np.random.default_rng(seed)
    span = times[-1] - times[0]
    scale = _data_scale(u)

    lo_box = np.log([VARIANCE_BOX[0] * scale, LENGTHSCALE_BOX[0] * span, NOISE_BOX[0] * scale])
    hi_box = np.log([VARIANCE_BOX[1] * scale, LENGTHSCALE_BOX[1] * span, NOISE_BOX[1] * scale])
    bounds = list(
        zip(
            np.log([VARIANCE_BOUNDS[0] * scale, LENGTHSCALE_BOUNDS[0] * span, NOISE_BOUNDS[0] * scale]),
            np.log([VARIANCE_BOUNDS[1] * scale, LENGTHSCALE_BOUNDS[1] * span, NOISE_BOUNDS[1] * scale]),
        )
    )
    starts = rng.uniform(lo_box, hi_box, size=(restarts, 3))

    def run(x0, t, y, maxfun=15000):
        sqdist = (t[:, None] - t[None, :]) ** 2
        f0, _ = _neg_lml_and_grad(x0, t, y, sqdist)
        res = scipy.optimize.minimize(
            _neg_lml_and_grad,
            x0,
            args=(t, y, sqdist),
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxfun": maxfun},
        )
        return f0, res

    screening = screen_size is not None and times.size > screen_size
    if screening:
        idx = np.unique(np.linspace(0, times.size - 1, screen_size).round().astype(int))
        t_fit, u_fit = times[idx], u[idx]
    else:
        t_fit, u_fit = times, u

    results = []
    for x0 in starts:
        f0, res = run(x0, t_fit, u_fit)
        if np.isfinite(res.fun) and res.fun < 1e24:
            results.append((res.fun, res.x, f0))
    if not results:
        raise OptimizationFailed("no restart produced a finite marginal likelihood")
    results.sort(key=lambda r: r[0])
    best_x = results[0][1]
    start_values = [r[2] for r in results]

    if screening:
        # short polish on the full data; the screened optimum is kept if it is better
        f0, res = run(best_x, times, u, maxfun=REFINE_MAXFUN)
        best_f, best_x = min([(f0, best_x), (res.fun, res.x)], key=lambda c: c[0])
        if not np.isfinite(best_f) or best_f >= 1e24:
            raise OptimizationFailed("refinement on the full data failed")
    else:
        best_f = results[0][0]

    variance, lengthscale, chi_u = np.exp(best_x)
    kernel = SEKernel(float(variance), float(lengthscale))
    log.debug("GP hyperparameters: variance=%g lengthscale=%g chi_u=%g lml=%g", variance, lengthscale, chi_u, -best_f)
    if return_info:
        return kernel, float(chi_u), {"log_marginal_likelihood": -float(best_f), "start_values": [-v for v in start_values]}
    return kernel, float(chi_u)


class GPStateModel:
    """GP emulator for one state component on a fixed grid.

    Parameters
    ----------
    kernel : SEKernel
    chi_u : float
        State noise variance.
    times : (K,) array
    u : (K,) array
        Observed values.
    chi_d : float, optional
        Derivative noise variance.  ``None`` until :meth:`condition` is run.
    derivative_index : array of int, optional
        Subset of ``times`` at which derivatives are modelled (defaults to all).

    Notes
    -----
    Instances are treated as immutable; :meth:`condition` returns a new one.
    """

    def __init__(self, kernel, chi_u, times, u, chi_d=None, derivative_index=None):
        self.kernel = kernel
        self.chi_u = float(chi_u)
        self.times = check_times(times)
        self.u = np.asarray(u, dtype=float)
        if self.u.shape != self.times.shape:
            raise ValueError("u must match times")
        if derivative_index is None:
            self.derivative_index = np.arange(self.times.size)
        else:
            self.derivative_index = np.unique(np.asarray(derivative_index, dtype=int))
        self.times_d = self.times[self.derivative_index]

        blocks = assemble(kernel, self.times, self.chi_u, 0.0 if chi_d is None else chi_d, times_d=self.times_d)
        L, jitter = jittered_cholesky(blocks.Kuu)
        self.jitter = jitter
        self.blocks = assemble(
            kernel, self.times, self.chi_u + jitter, 0.0 if chi_d is None else chi_d, times_d=self.times_d
        )
        self._L = L
        self._alpha = scipy.linalg.cho_solve((L, True), self.u, check_finite=False)
        self.chi_d = None if chi_d is None else float(chi_d)
        self._Rdd = None
        self._schur = None
        if chi_d is not None:
            self._Rdd, self._schur_cond = self._precision(self.chi_d)
            if self._Rdd is None:
                raise ConditioningFailed(f"Schur complement not positive definite for chi_d={chi_d:g}")

    # Construction ------------------------------------------------------------
    @classmethod
    def fit(cls, times, u, restarts=8, seed=0, chi_d_init=None, derivative_index=None, screen_size=400):
        """Fit hyperparameters, then condition the derivative precision."""
        kernel, chi_u = fit_hyperparameters(times, u, restarts=restarts, seed=seed, screen_size=screen_size)
        model = cls(kernel, chi_u, times, u, derivative_index=derivative_index)
        return model.condition(chi_d_init)

    def condition(self, chi_d_init=None):
        """Return a copy with ``chi_d`` escalated until ``Rdd`` is well conditioned.

        ``chi_d`` starts at ``chi_d_init`` (default: the effective state
        noise ``chi_u + jitter``) and is multiplied by 10 until the Cholesky
        factor of the Schur complement exists and its squared diagonal
        ratio is at most ``1e8``.
        """
        base = self.chi_u + self.jitter
        chi_d = base if chi_d_init is None else float(chi_d_init)
        if chi_d <= 0:
            raise ValueError("chi_d_init must be positive")
        limit = CHI_D_RATIO_MAX * max(base, chi_d)
        steps = 0
        while chi_d <= limit * (1 + 1e-12):
            Rdd, cond = self._precision(chi_d)
            if Rdd is not None and cond <= COND_MAX:
                out = GPStateModel.__new__(GPStateModel)
                out.__dict__.update(self.__dict__)
                out.chi_d = chi_d
                out.blocks = assemble(
                    self.kernel, self.times, self.chi_u + self.jitter, chi_d, times_d=self.times_d
                )
                out._Rdd = Rdd
                out._schur_cond = cond
                out.chi_d_escalations = steps
                if steps:
                    log.info("chi_d escalated %d times to %g", steps, chi_d)
                return out
            chi_d *= CHI_D_FACTOR
            steps += 1
        raise ConditioningFailed(
            f"Schur complement condition estimate above {COND_MAX:g} for chi_d up to {limit:g}"
        )

    def _schur_noise_free(self):
        if self._schur is None:
            V = scipy.linalg.solve_triangular(self._L, self.blocks.Kud, lower=True, check_finite=False)
            S = self.kernel.dt_dt2(self.times_d[:, None], self.times_d[None, :]) - V.T @ V
            self._schur = 0.5 * (S + S.T)
        return self._schur

    def schur_complement(self, chi_d):
        """``Kdd - Kdu Kuu^-1 Kud`` with derivative noise ``chi_d``."""
        S = self._schur_noise_free().copy()
        S[np.diag_indices_from(S)] += chi_d
        return S

    def _precision(self, chi_d):
        S = self.schur_complement(chi_d)
        try:
            Ls = scipy.linalg.cholesky(S, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            return None, np.inf
        dg = np.diag(Ls)
        cond = float((dg.max() / dg.min()) ** 2)
        Rdd = scipy.linalg.cho_solve((Ls, True), np.eye(S.shape[0]), check_finite=False)
        return 0.5 * (Rdd + Rdd.T), cond

    # Derived quantities ------------------------------------------------------
    @property
    def Kuu_inv_u(self):
        return self._alpha

    @property
    def u_hat(self):
        """Smoothed states ``k(T, T) Kuu^-1 u``."""
        return self.kernel(self.times[:, None], self.times[None, :]) @ self._alpha

    @property
    def d_hat(self):
        """Derivative estimate ``Kdu Kuu^-1 u`` on the derivative grid."""
        return self.blocks.Kdu @ self._alpha

    @property
    def Rdd(self):
        if self._Rdd is None:
            raise RuntimeError("derivative precision not conditioned yet; call condition()")
        return self._Rdd

    @property
    def Rdu(self):
        """``-Rdd Kdu Kuu^-1``."""
        KduKinv = scipy.linalg.cho_solve((self._L, True), self.blocks.Kud, check_finite=False).T
        return -self.Rdd @ KduKinv

    @property
    def condition_estimate(self):
        return self._schur_cond

    def mean(self, t):
        """Posterior mean of the state at arbitrary times."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return self.kernel(t[:, None], self.times[None, :]) @ self._alpha

    def mean_dt(self, t):
        """Time derivative of the posterior mean at arbitrary times."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return self.kernel.dt(t[:, None], self.times[None, :]) @ self._alpha

    def log_marginal_likelihood(self):
        return float(
            -0.5 * self.u @ self._alpha - np.sum(np.log(np.diag(self._L))) - 0.5 * self.u.size * LOG2PI
        )

    # Serialisation -----------------------------------------------------------
    def to_dict(self):
        """JSON-ready record; cached matrices are recomputed by :meth:`from_dict`."""
        return {
            "kernel": self.kernel.to_dict(),
            "chi_u": self.chi_u,
            "chi_d": self.chi_d,
            "jitter": self.jitter,
            "times": self.times.tolist(),
            "u": self.u.tolist(),
            "derivative_index": self.derivative_index.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        kd = d["kernel"]
        if kd.get("type", "squared_exponential") != "squared_exponential":
            raise ValueError(f"unsupported kernel type {kd['type']!r}")
        kernel = SEKernel(kd["variance"], kd["lengthscale"])
        return cls(kernel, d["chi_u"], d["times"], d["u"], chi_d=d.get("chi_d"), derivative_index=d.get("derivative_index"))

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def __repr__(self):
        return (
            f"GPStateModel(K={self.times.size}, variance={self.kernel.variance:.4g}, "
            f"lengthscale={self.kernel.lengthscale:.4g}, chi_u={self.chi_u:.3g}, chi_d={self.chi_d})"
        )


# Functional interface -------------------------------------------------------
def smooth_states(model):
    return model.u_hat


def estimate_derivatives(model):
    return model.d_hat


def derivative_precision(model, chi_d_init=None):
    """Return ``(Rdd, chi_d_used)`` after conditioning."""
    conditioned = model.condition(chi_d_init)
    return conditioned.Rdd, conditioned.chi_d
