"""Squared-exponential covariance and its time derivatives.

A state component ``x(t)`` modelled as a zero-mean GP with kernel ``k`` has
a derivative ``dx/dt`` that is jointly Gaussian with it.  The cross
covariances are partial derivatives of ``k``::

    cov(x(t),  x(t'))  = k(t, t')
    cov(dx(t), x(t'))  = d/dt k(t, t')
    cov(x(t),  dx(t')) = d/dt' k(t, t')
    cov(dx(t), dx(t')) = d/dt d/dt' k(t, t')

:func:`assemble` evaluates these on a time grid and adds the white-noise
variances ``chi_u`` and ``chi_d`` to the diagonal blocks.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import NonIncreasingTimes

__all__ = [
    "StationaryKernel",
    "SEKernel",
    "GramBlocks",
    "assemble",
    "jittered_cholesky",
]

JITTER_START = 1e-10
JITTER_MAX = 1e-6


class StationaryKernel(abc.ABC):
    """Interface for a 1-D stationary kernel with analytic time derivatives."""

    @abc.abstractmethod
    def __call__(self, t, t2):
        """Covariance k(t, t2); broadcasts over array arguments."""

    @abc.abstractmethod
    def dt(self, t, t2):
        """Partial derivative with respect to the first argument."""

    def dt2(self, t, t2):
        """Partial derivative with respect to the second argument."""
        # stationary: k depends on t - t2 only
        return -self.dt(t, t2)

    @abc.abstractmethod
    def dt_dt2(self, t, t2):
        """Mixed second derivative d/dt d/dt2."""


@dataclass(frozen=True)
class SEKernel(StationaryKernel):
    """Squared-exponential kernel ``variance * exp(-(t - t2)**2 / (2 lengthscale**2))``.

    Parameters
    ----------
    variance : float
        Signal variance (state units squared).
    lengthscale : float
        Correlation length (time units).
    """

    variance: float
    lengthscale: float

    def __post_init__(self):
        if not (self.variance > 0 and np.isfinite(self.variance)):
            raise ValueError(f"variance must be positive, got {self.variance}")
        if not (self.lengthscale > 0 and np.isfinite(self.lengthscale)):
            raise ValueError(f"lengthscale must be positive, got {self.lengthscale}")

    def __call__(self, t, t2):
        r = np.subtract(t, t2)
        return self.variance * np.exp(-0.5 * (r / self.lengthscale) ** 2)

    def dt(self, t, t2):
        r = np.subtract(t, t2)
        return -r / self.lengthscale**2 * self(t, t2)

    def dt_dt2(self, t, t2):
        r = np.subtract(t, t2)
        ell2 = self.lengthscale**2
        return (1.0 / ell2 - r**2 / ell2**2) * self(t, t2)

    def to_dict(self):
        return {"type": "squared_exponential", "variance": self.variance, "lengthscale": self.lengthscale}


# shorter aliases matching the operation names used elsewhere
def eval_kernel(kernel, t, t2):
    return kernel(t, t2)


def eval_dt(kernel, t, t2):
    return kernel.dt(t, t2)


def eval_dt2(kernel, t, t2):
    return kernel.dt2(t, t2)


def eval_dt_dt2(kernel, t, t2):
    return kernel.dt_dt2(t, t2)


@dataclass(frozen=True)
class GramBlocks:
    """Covariance blocks of ``(D, U)`` on a time grid.

    ``Kud`` is not stored separately; it is the transpose of ``Kdu``.
    """

    Kuu: np.ndarray
    Kdu: np.ndarray
    Kdd: np.ndarray
    times: np.ndarray
    chi_u: float
    chi_d: float
    times_d: np.ndarray = field(default=None)

    @property
    def Kud(self):
        return self.Kdu.T

    def joint(self):
        """Full covariance of ``[D; U]`` as one dense matrix."""
        return np.block([[self.Kdd, self.Kdu], [self.Kud, self.Kuu]])


def check_times(times, min_len=2):
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < min_len:
        raise NonIncreasingTimes(f"need a 1-D grid of at least {min_len} times, got shape {times.shape}")
    if not np.all(np.diff(times) > 0):
        raise NonIncreasingTimes("times must be strictly increasing")
    return times


def assemble(kernel, times, chi_u, chi_d, times_d=None):
    """Build the Gram blocks on ``times``.

    Parameters
    ----------
    kernel : StationaryKernel
    times : (K,) array
        Strictly increasing observation times of the state.
    chi_u, chi_d : float
        White-noise variances added to the state and derivative blocks.
    times_d : (Kd,) array, optional
        Instances at which derivatives are modelled.  Defaults to ``times``.

    Returns
    -------
    GramBlocks
    """
    times = check_times(times)
    times_d = times if times_d is None else check_times(times_d, min_len=1)
    Tu = times[:, None]
    Td = times_d[:, None]
    Kuu = kernel(Tu, times[None, :]) + chi_u * np.eye(times.size)
    Kdu = kernel.dt(Td, times[None, :])
    Kdd = kernel.dt_dt2(Td, times_d[None, :]) + chi_d * np.eye(times_d.size)
    return GramBlocks(Kuu=Kuu, Kdu=Kdu, Kdd=Kdd, times=times, chi_u=chi_u, chi_d=chi_d, times_d=times_d)


def jittered_cholesky(A, start=JITTER_START, maximum=JITTER_MAX):
    """Lower Cholesky factor of ``A + jitter * I``.

    The jitter starts at ``start * max(diag(A))`` and grows tenfold after
    each failed attempt until it would exceed ``maximum * max(diag(A))``.

    Returns
    -------
    L : (n, n) ndarray
    jitter : float
        Absolute jitter that was added.
    """
    scale = float(np.max(np.diag(A)))
    rel = start
    while rel <= maximum * (1 + 1e-12):
        jitter = rel * scale
        try:
            L = scipy.linalg.cholesky(A + jitter * np.eye(A.shape[0]), lower=True, check_finite=False)
            return L, jitter
        except np.linalg.LinAlgError:
            rel *= 10.0
    raise np.linalg.LinAlgError(f"matrix not positive definite even with jitter {maximum:g} x max diagonal")
