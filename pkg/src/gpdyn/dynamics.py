"""Right-hand sides, integrators and Bayesian ensemble prediction.

Right-hand sides are vectorised: ``rhs(x, theta)`` accepts states of shape
``(..., N)`` and parameters of shape ``(..., P)`` and returns ``(..., N)``.
That lets the implicit Euler integrator advance a whole ensemble of
parameter draws in lock-step.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.integrate

from .errors import AllDrawsDiverged, DomainViolation, NewtonDivergence, StepSizeUnderflow

__all__ = [
    "SystemSpec",
    "EnsemblePrediction",
    "SYSTEMS",
    "get_system",
    "lotka_volterra",
    "logistic",
    "black_hole",
    "affine_system",
    "integrate",
    "implicit_euler",
    "adaptive_rk",
    "ensemble_predict",
    "blackhole_radius",
    "blackhole_observables",
    "blackhole_support",
    "write_band_csv",
]

NEWTON_TOL = 1e-12
NEWTON_MAXITER = 50


@dataclass(frozen=True)
class SystemSpec:
    """A parametrised ODE system ``dx/dt = rhs(x, theta)``.

    Attributes
    ----------
    name : str
    state_dim : int
    rhs : callable
        ``rhs(x, theta)`` vectorised over leading axes.
    theta_dim : tuple of int
        Number of parameters in each equation.  ``theta`` passed to ``rhs``
        is the concatenation over equations, unless ``shared`` is set.
    truth : tuple of arrays, optional
        Ground-truth parameters per equation.
    jac : callable, optional
        ``jac(x, theta)`` returning ``(..., N, N)``; finite differences otherwise.
    shared : bool
        All equations share one parameter vector of length ``theta_dim[0]``.
    """

    name: str
    state_dim: int
    rhs: Callable
    theta_dim: tuple
    truth: Optional[tuple] = None
    jac: Optional[Callable] = None
    shared: bool = False
    state_names: tuple = ()
    default_ic: Optional[tuple] = None

    @property
    def n_params(self):
        return self.theta_dim[0] if self.shared else int(sum(self.theta_dim))

    @property
    def truth_flat(self):
        if self.truth is None:
            return None
        if self.shared:
            return np.asarray(self.truth[0], dtype=float)
        return np.concatenate([np.asarray(t, dtype=float) for t in self.truth])

    def jacobian(self, x, theta):
        if self.jac is not None:
            return self.jac(x, theta)
        return _fd_jacobian(self.rhs, x, theta)


def _fd_jacobian(rhs, x, theta, eps=1e-7):
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    J = np.empty(x.shape + (n,))
    for j in range(n):
        h = eps * np.maximum(1.0, np.abs(x[..., j]))
        xp = x.copy()
        xm = x.copy()
        xp[..., j] += h
        xm[..., j] -= h
        J[..., :, j] = (rhs(xp, theta) - rhs(xm, theta)) / (2 * h[..., None])
    return J


# Benchmark systems ===========================================================
def _lv_rhs(x, theta):
    # theta = (alpha, beta, delta, gamma)
    x1, x2 = x[..., 0], x[..., 1]
    a, b, d, g = (theta[..., k] for k in range(4))
    return np.stack([a * x1 - b * x1 * x2, d * x1 * x2 - g * x2], axis=-1)


def _lv_jac(x, theta):
    x1, x2 = x[..., 0], x[..., 1]
    a, b, d, g = (theta[..., k] for k in range(4))
    row1 = np.stack([a - b * x2, -b * x1], axis=-1)
    row2 = np.stack([d * x2, d * x1 - g], axis=-1)
    return np.stack([row1, row2], axis=-2)


def lotka_volterra(alpha=1.5, beta=1.0, delta=1.0, gamma=3.0):
    """Predator-prey system with ``theta = (alpha, beta, delta, gamma)``."""
    return SystemSpec(
        name="lotka-volterra",
        state_dim=2,
        rhs=_lv_rhs,
        theta_dim=(2, 2),
        truth=(np.array([alpha, beta]), np.array([delta, gamma])),
        jac=_lv_jac,
        state_names=("x1", "x2"),
        default_ic=(1.0, 1.0),
    )


def lv_first_integral(x, theta):
    """Conserved quantity ``delta x1 - gamma ln x1 + beta x2 - alpha ln x2``."""
    a, b, d, g = theta
    x = np.asarray(x)
    return d * x[..., 0] - g * np.log(x[..., 0]) + b * x[..., 1] - a * np.log(x[..., 1])


def _logistic_rhs(x, theta):
    return x * (1.0 - x)


def logistic():
    """``dx/dt = x (1 - x)``; no free parameters."""
    return SystemSpec(
        name="logistic",
        state_dim=1,
        rhs=_logistic_rhs,
        theta_dim=(0,),
        truth=(np.zeros(0),),
        jac=lambda x, theta: (1.0 - 2.0 * x)[..., None],
        state_names=("x",),
        default_ic=(0.01,),
    )


def logistic_solution(t, gamma):
    """Closed-form solution with ``x(0) = gamma``."""
    t = np.asarray(t, dtype=float)
    return gamma / (gamma + (1.0 - gamma) * np.exp(-t))


def _bh_common_factor(cos_chi, e, p):
    # shared by both equations: (p-2-2e cos chi)(1+e cos chi)^2 / sqrt((p-2)^2 - 4e^2)
    return (p - 2.0 - 2.0 * e * cos_chi) * (1.0 + e * cos_chi) ** 2 / np.sqrt((p - 2.0) ** 2 - 4.0 * e**2)


def _bh_rhs(x, theta):
    chi = x[..., 1]
    e, p = theta[..., 0], theta[..., 1]
    c = np.cos(chi)
    F = _bh_common_factor(c, e, p)
    with np.errstate(invalid="ignore"):
        root = np.sqrt(p - 6.0 - 2.0 * e * c)
    phi_dot = F / p**1.5
    chi_dot = F * root / p**2
    return np.stack([phi_dot, chi_dot], axis=-1)


def black_hole(e=0.5, p=100.0):
    """Relativistic orbit of a test body; ``x = (phi, chi)``, shared ``theta = (e, p)``."""
    return SystemSpec(
        name="black-hole",
        state_dim=2,
        rhs=_bh_rhs,
        theta_dim=(2, 2),
        truth=(np.array([e, p]), np.array([e, p])),
        shared=True,
        state_names=("phi", "chi"),
        default_ic=(0.0, math.pi),
    )


def affine_system(dictionaries, name="affine", truth=None):
    """System whose i-th equation is ``g_i(x) . theta_i`` for the given dictionaries."""
    from .inference_linear import Dictionary  # local import: avoids a cycle

    dictionaries = list(dictionaries)
    sizes = tuple(d.p for d in dictionaries)
    offsets = np.cumsum((0,) + sizes)
    N = dictionaries[0].arity

    def rhs(x, theta):
        theta = np.asarray(theta, dtype=float)
        out = []
        for i, d in enumerate(dictionaries):
            G = d.evaluate(x)
            out.append(np.sum(G * theta[..., offsets[i] : offsets[i + 1]], axis=-1))
        return np.stack(out, axis=-1)

    def jac(x, theta):
        theta = np.asarray(theta, dtype=float)
        rows = []
        for i, d in enumerate(dictionaries):
            dG = d.gradient(x)  # (..., p, N)
            if dG is None:
                return _fd_jacobian(rhs, x, theta)
            rows.append(np.einsum("...pn,...p->...n", dG, theta[..., offsets[i] : offsets[i + 1]]))
        return np.stack(rows, axis=-2)

    assert all(isinstance(d, Dictionary) for d in dictionaries)
    return SystemSpec(name=name, state_dim=N, rhs=rhs, theta_dim=sizes, truth=truth, jac=jac)


SYSTEMS = {
    "lotka-volterra": lotka_volterra,
    "logistic": logistic,
    "black-hole": black_hole,
}


def get_system(name):
    try:
        return SYSTEMS[name]()
    except KeyError:
        raise ValueError(f"unknown system {name!r}; choose from {sorted(SYSTEMS)}") from None


# Integrators =================================================================
def implicit_euler(spec, theta, x0, t_span, dt, t_eval=None, batch=False):
    """Backward Euler with a damped Newton solve per step.

    Parameters
    ----------
    spec : SystemSpec
    theta : (P,) or (D, P) array
    x0 : (N,) or (D, N) array
    t_span : (t0, t1)
    dt : float
    t_eval : array, optional
        Output instants; values between steps are linearly interpolated.
        Defaults to every step.
    batch : bool
        Leading axis of ``theta``/``x0`` indexes ensemble members.  Members
        whose Newton iteration fails are returned as NaN rather than raising.

    Returns
    -------
    t : (M,) array
    x : (M, N) or (D, M, N) array
    """
    t0, t1 = map(float, t_span)
    if not t1 > t0:
        raise ValueError("t_span must be increasing")
    if not dt > 0:
        raise ValueError("dt must be positive")
    n_steps = int(math.ceil((t1 - t0) / dt - 1e-9))
    grid = t0 + dt * np.arange(n_steps + 1)
    grid[-1] = t1  # last step may be shorter than dt

    theta = np.asarray(theta, dtype=float)
    x = np.array(x0, dtype=float)
    if not batch:
        theta = theta[None]
        x = x[None]
    D, N = x.shape
    theta = np.broadcast_to(theta, (D, theta.shape[-1]))
    eye = np.eye(N)
    out = np.empty((D, grid.size, N))
    out[:, 0] = x
    alive = np.ones(D, dtype=bool)

    for k in range(1, grid.size):
        h = grid[k] - grid[k - 1]
        y = x + h * spec.rhs(x, theta)
        converged = np.zeros(D, dtype=bool)
        r = y - x - h * spec.rhs(y, theta)
        rnorm = np.max(np.abs(r), axis=-1)
        for _ in range(NEWTON_MAXITER):
            converged = rnorm <= NEWTON_TOL * (1.0 + np.max(np.abs(y), axis=-1))
            converged |= ~alive
            if converged.all():
                break
            J = eye - h * spec.jacobian(y, theta)
            with np.errstate(all="ignore"):
                try:
                    step = np.linalg.solve(J, r[..., None])[..., 0]
                except np.linalg.LinAlgError:
                    step = np.stack([_safe_solve(J[i], r[i]) for i in range(D)])
            # damping: halve the step until the residual decreases
            lam = np.ones(D)
            y_new = y - step
            with np.errstate(all="ignore"):
                r_new = y_new - x - h * spec.rhs(y_new, theta)
            rn_new = np.max(np.abs(r_new), axis=-1)
            for _ in range(30):
                bad = ~(rn_new < rnorm) & ~converged & np.isfinite(rnorm)
                if not bad.any():
                    break
                lam[bad] *= 0.5
                y_try = y - lam[:, None] * step
                with np.errstate(all="ignore"):
                    r_try = y_try - x - h * spec.rhs(y_try, theta)
                y_new[bad] = y_try[bad]
                r_new[bad] = r_try[bad]
                rn_new[bad] = np.max(np.abs(r_try[bad]), axis=-1)
            upd = ~converged
            y[upd] = y_new[upd]
            r[upd] = r_new[upd]
            rnorm[upd] = rn_new[upd]
        else:
            converged = rnorm <= NEWTON_TOL * (1.0 + np.max(np.abs(y), axis=-1))
            converged |= ~alive
        failed = ~converged | ~np.all(np.isfinite(y), axis=-1)
        if failed.any():
            if not batch:
                raise NewtonDivergence(k, x[0].copy())
            alive &= ~failed
            y[failed] = np.nan
        x = y
        out[:, k] = x

    if t_eval is not None:
        t_eval = np.asarray(t_eval, dtype=float)
        res = np.empty((D, t_eval.size, N))
        for d in range(D):
            for j in range(N):
                res[d, :, j] = np.interp(t_eval, grid, out[d, :, j])
        grid, out = t_eval, res
    return grid, (out if batch else out[0])


def _safe_solve(A, b):
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        return np.full_like(b, np.nan)


def adaptive_rk(spec, theta, x0, t_span, t_eval=None, rtol=1e-8, atol=1e-10, method="DOP853"):
    """Embedded Runge-Kutta integration (scipy ``solve_ivp``).

    Returns
    -------
    t : (M,) array
    x : (M, N) array

    Raises
    ------
    StepSizeUnderflow
        The step size collapsed (typically a singular or blowing-up solution).
    DomainViolation
        The right-hand side became non-finite.
    """
    theta = np.asarray(theta, dtype=float)
    x0 = np.asarray(x0, dtype=float)

    def fun(t, x):
        return spec.rhs(x, theta)

    sol = scipy.integrate.solve_ivp(fun, t_span, x0, method=method, t_eval=t_eval, rtol=rtol, atol=atol)
    if sol.status != 0:
        raise StepSizeUnderflow(sol.message)
    if not np.all(np.isfinite(sol.y)):
        raise DomainViolation("right-hand side produced non-finite values")
    return sol.t, sol.y.T


def integrate(spec, theta, x0, t_span, method="implicit-euler", dt=1e-3, rtol=1e-8, atol=1e-10, t_eval=None):
    """Integrate ``spec`` from ``x0`` over ``t_span``.

    ``method`` is ``"implicit-euler"`` (fixed ``dt``) or ``"adaptive-rk"``
    (``rtol``/``atol``).
    """
    if method == "implicit-euler":
        return implicit_euler(spec, theta, x0, t_span, dt, t_eval=t_eval)
    if method == "adaptive-rk":
        if not (rtol > 0 and atol > 0):
            raise ValueError("tolerances must be positive")
        return adaptive_rk(spec, theta, x0, t_span, t_eval=t_eval, rtol=rtol, atol=atol)
    raise ValueError(f"unknown method {method!r}")


# Ensemble prediction =========================================================
@dataclass
class EnsemblePrediction:
    """Pointwise moments of an ensemble of trajectories."""

    times: np.ndarray
    mean: np.ndarray  # (M, N)
    sd: np.ndarray  # (M, N)
    draws_used: int
    divergent_draws: int
    trajectories: Optional[np.ndarray] = field(default=None, repr=False)

    def to_rows(self):
        for k, t in enumerate(self.times):
            row = [t]
            for j in range(self.mean.shape[1]):
                row += [self.mean[k, j], self.sd[k, j]]
            yield row


def _parameter_draws(posterior, draws, rng):
    """Sample parameter vectors from a Gaussian posterior or an MCMC chain."""
    samples = getattr(posterior, "samples", None)
    if samples is not None:
        idx = rng.integers(0, samples.shape[0], size=draws)
        return samples[idx]
    mean = np.asarray(posterior.mean, dtype=float)
    cov = np.asarray(posterior.covariance, dtype=float)
    # eigen-decomposition tolerates singular (point-mass) covariances
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    root = V * np.sqrt(np.clip(w, 0.0, None))
    z = rng.standard_normal((draws, mean.size))
    return mean + z @ root.T


def ensemble_predict(
    spec,
    posterior,
    x0,
    t_eval,
    draws=100,
    seed=0,
    method="adaptive-rk",
    dt=1e-3,
    rtol=1e-8,
    atol=1e-10,
    keep_trajectories=False,
    theta_map=None,
):
    """Propagate posterior parameter uncertainty through the ODE.

    Parameters
    ----------
    spec : SystemSpec
    posterior : GaussianPosterior or SampleChain
        Anything with ``mean``/``covariance`` or with ``samples``.
    x0 : (N,) array
    t_eval : (M,) array
        Output grid; integration starts at ``t_eval[0]``.
    draws : int
    seed : int
    method : {"adaptive-rk", "implicit-euler"}
    theta_map : callable, optional
        Maps a posterior draw to the ``theta`` expected by ``spec.rhs``.

    Returns
    -------
    EnsemblePrediction
    """
    if draws < 2:
        raise ValueError("need at least two draws")
    rng = np.random.default_rng(seed)
    t_eval = np.asarray(t_eval, dtype=float)
    thetas = _parameter_draws(posterior, draws, rng)
    if theta_map is not None:
        thetas = np.stack([theta_map(th) for th in thetas])
    x0 = np.asarray(x0, dtype=float)
    t_span = (t_eval[0], t_eval[-1])

    if method == "implicit-euler":
        _, traj = implicit_euler(spec, thetas, np.broadcast_to(x0, (draws, x0.size)), t_span, dt, t_eval=t_eval, batch=True)
    elif method == "adaptive-rk":
        traj = np.full((draws, t_eval.size, x0.size), np.nan)
        for d in range(draws):
            try:
                with np.errstate(all="ignore"):
                    _, traj[d] = adaptive_rk(spec, thetas[d], x0, t_span, t_eval=t_eval, rtol=rtol, atol=atol)
            except (StepSizeUnderflow, DomainViolation, ValueError):
                pass
    else:
        raise ValueError(f"unknown method {method!r}")

    ok = np.all(np.isfinite(traj), axis=(1, 2))
    n_ok = int(ok.sum())
    if n_ok == 0:
        raise AllDrawsDiverged(f"all {draws} ensemble members diverged")
    good = traj[ok]
    mean = good.mean(axis=0)
    sd = good.std(axis=0, ddof=1) if n_ok > 1 else np.zeros_like(mean)
    return EnsemblePrediction(
        times=t_eval,
        mean=mean,
        sd=sd,
        draws_used=n_ok,
        divergent_draws=draws - n_ok,
        trajectories=good if keep_trajectories else None,
    )


def write_band_csv(path, prediction, state_names=None):
    """Write ``t, <state>_mean, <state>_sd, ...`` rows."""
    N = prediction.mean.shape[1]
    names = list(state_names) if state_names else [f"state_{j + 1}" for j in range(N)]
    header = ["t"]
    for n in names:
        header += [f"{n}_mean", f"{n}_sd"]
    from .dataio import atomic_write

    with atomic_write(path) as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in prediction.to_rows():
            w.writerow([repr(float(v)) for v in row])


# Black hole geometry =========================================================
def blackhole_radius(chi, e, p):
    return p / (1.0 + e * np.cos(chi))


def blackhole_observables(phi, chi, e, p):
    """Cartesian position ``-r [cos phi, sin phi]`` of the test body.

    Raises
    ------
    DomainViolation
        If ``p - 6 - 2 e cos(chi) < 0`` anywhere along the trajectory.
    """
    phi = np.asarray(phi, dtype=float)
    chi = np.asarray(chi, dtype=float)
    if not (0.0 <= e < 1.0):
        raise DomainViolation(f"eccentricity must lie in [0, 1), got {e}")
    if np.any(p - 6.0 - 2.0 * e * np.cos(chi) < 0):
        raise DomainViolation("p - 6 - 2 e cos(chi) < 0: orbit outside the valid region")
    r = blackhole_radius(chi, e, p)
    return np.stack([-r * np.cos(phi), -r * np.sin(phi)], axis=-1)


def blackhole_support(theta):
    """Parameter region where the orbit equations are defined: ``0 <= e < 1``, ``p > 6 + 2e``."""
    e, p = float(theta[0]), float(theta[1])
    return 0.0 <= e < 1.0 and p > 6.0 + 2.0 * e
