"""Benchmark data, finite-difference baselines and dataset files.

Data are fabricated in three steps: a dense solve of the true system, a
random subsample of the training window, then additive Gaussian noise.
Files are written atomically (temporary file + rename).
"""

from __future__ import annotations

import contextlib
import csv
import functools
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.signal

from . import dynamics
from .errors import DegenerateGrid, EmptyTrainingSet, NonUniformGrid, SingularSystem, WindowTooLarge

__all__ = [
    "Dataset",
    "BenchmarkSetup",
    "BENCHMARKS",
    "generate",
    "generate_benchmark",
    "dense_solution",
    "finite_difference_derivatives",
    "savitzky_golay",
    "baseline_linreg",
    "save_dataset",
    "load_dataset",
    "atomic_write",
]


@dataclass
class Dataset:
    """Sampled trajectory with provenance.

    ``values`` is what inference sees.  ``clean_values`` is kept only for
    error reporting and is written to a separate file.
    """

    system: str
    ic: np.ndarray
    times: np.ndarray
    values: np.ndarray
    clean_values: Optional[np.ndarray]
    noise_level: float = 0.0
    density: float = 1.0
    seed: Optional[int] = None
    window: tuple = (0.0, 0.0)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float).T).T
        if self.values.shape[0] != self.times.size:
            raise ValueError("values must have one row per time")
        if self.times.size and not np.all(np.diff(self.times) > 0):
            raise DegenerateGrid("dataset times must be strictly increasing")
        self.ic = np.atleast_1d(np.asarray(self.ic, dtype=float))

    @property
    def K(self):
        return self.times.size

    @property
    def N(self):
        return self.values.shape[1]

    def metadata(self):
        return {
            "system": self.system,
            "ic": self.ic.tolist(),
            "seed": self.seed,
            "noise_level": self.noise_level,
            "density": self.density,
            "window": [float(w) for w in self.window],
            "n_points": int(self.K),
            **self.extra,
        }


# Files =======================================================================
@contextlib.contextmanager
def atomic_write(path, mode="w"):
    """Open a temporary sibling of ``path`` and rename it into place on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, newline="" if "b" not in mode else None) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def _write_table(path, times, values, names):
    with atomic_write(path) as fh:
        w = csv.writer(fh)
        w.writerow(["t", *names])
        for t, row in zip(times, values):
            w.writerow([repr(float(t)), *(repr(float(v)) for v in row)])


def _read_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "t":
        raise ValueError(f"{path}: expected a header starting with 't'")
    data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, len(rows[0]))
    return data[:, 0], data[:, 1:]


def save_dataset(dataset, path):
    """Write ``<path>`` (t, x1..xN), ``<stem>.clean.csv`` and ``<stem>.json``.

    Returns the list of written paths.
    """
    path = Path(path)
    names = [f"x{j + 1}" for j in range(dataset.N)]
    _write_table(path, dataset.times, dataset.values, names)
    out = [path]
    if dataset.clean_values is not None:
        clean = path.with_suffix(".clean.csv")
        _write_table(clean, dataset.times, dataset.clean_values, names)
        out.append(clean)
    meta = path.with_suffix(".json")
    with atomic_write(meta) as fh:
        json.dump(dataset.metadata(), fh, indent=2, sort_keys=True)
    out.append(meta)
    return out


def load_dataset(path, with_clean=False):
    """Read a dataset written by :func:`save_dataset`.

    Clean values are only loaded on request.
    """
    path = Path(path)
    times, values = _read_table(path)
    meta_path = path.with_suffix(".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    clean = None
    clean_path = path.with_suffix(".clean.csv")
    if with_clean and clean_path.exists():
        clean = _read_table(clean_path)[1]
    known = {"system", "ic", "seed", "noise_level", "density", "window", "n_points"}
    return Dataset(
        system=meta.get("system", "unknown"),
        ic=meta.get("ic", values[0] if len(values) else [0.0]),
        times=times,
        values=values,
        clean_values=clean,
        noise_level=meta.get("noise_level", 0.0),
        density=meta.get("density", 1.0),
        seed=meta.get("seed"),
        window=tuple(meta.get("window", (times[0], times[-1]) if times.size else (0.0, 0.0))),
        extra={k: v for k, v in meta.items() if k not in known},
    )


# Generation ==================================================================
@functools.lru_cache(maxsize=16)
def _dense_cached(system, theta, ic, t_end, dt, method, rtol):
    spec = dynamics.get_system(system)
    grid = np.linspace(0.0, t_end, int(round(t_end / dt)) + 1)
    if method == "implicit-euler":
        t, x = dynamics.implicit_euler(spec, np.array(theta), np.array(ic), (0.0, t_end), dt)
    else:
        t, x = dynamics.adaptive_rk(spec, np.array(theta), np.array(ic), (0.0, t_end), t_eval=grid, rtol=rtol, atol=rtol)
    t.setflags(write=False)
    x.setflags(write=False)
    return t, x


def dense_solution(spec, ic, t_end, dt, method="implicit-euler", theta=None, rtol=1e-10):
    """Ground-truth trajectory on the grid ``0, dt, ..., t_end`` (cached, read-only)."""
    theta = spec.truth_flat if theta is None else np.asarray(theta, dtype=float)
    return _dense_cached(
        spec.name, tuple(float(v) for v in np.ravel(theta)), tuple(float(v) for v in np.ravel(ic)),
        float(t_end), float(dt), method, float(rtol),
    )


def generate(
    spec,
    ic,
    t_end,
    dt,
    train_fraction,
    density=1.0,
    noise_level=0.0,
    seed=0,
    pool_fraction=0.25,
    pool_seed=0,
    n_points=None,
    method="implicit-euler",
    rtol=1e-10,
):
    """Fabricate a training set and a clean test trajectory.

    Parameters
    ----------
    spec : SystemSpec
    ic : (N,) array
    t_end, dt : float
        Dense solve on ``[0, t_end]`` with spacing ``dt``.
    train_fraction : float
        Training window is ``[0, train_fraction * t_end]``.
    density : float in (0, 1]
        Fraction of the base pool kept for training.
    noise_level : float
        Noise sd per component is ``noise_level`` times the mean of the clean
        training values of that component.
    seed : int
        Drives the density subsample and the noise.
    pool_fraction : float
        Size of the base pool relative to the dense training window.  The
        pool is drawn once with ``pool_seed`` so that different densities
        share it.
    n_points : int, optional
        Draw exactly this many pool points instead of using ``density``.
    method : {"implicit-euler", "adaptive-rk"}

    Returns
    -------
    train, test : Dataset
        ``test`` is the full clean dense trajectory.
    """
    if not (0.0 < density <= 1.0):
        raise ValueError(f"density must lie in (0, 1], got {density}")
    if noise_level < 0:
        raise ValueError("noise_level must be non-negative")
    t, x = dense_solution(spec, ic, t_end, dt, method=method, rtol=rtol)
    t_train = train_fraction * t_end
    window = np.flatnonzero(t <= t_train * (1 + 1e-12))
    # the pool excludes t=0 so that 25% of the 8000 steps in [0, 8] is exactly 2000
    window = window[1:]
    pool_rng = np.random.default_rng(pool_seed)
    n_pool = int(round(pool_fraction * window.size))
    pool = np.sort(pool_rng.choice(window, n_pool, replace=False)) if n_pool < window.size else window
    K = int(n_points) if n_points is not None else int(round(density * pool.size))
    if K < 1 or K > pool.size:
        raise EmptyTrainingSet(f"density {density} of a {pool.size}-point pool gives {K} points")

    rng = np.random.default_rng(seed)
    idx = pool if K == pool.size else np.sort(rng.choice(pool, K, replace=False))
    clean = np.array(x[idx])
    values = clean.copy()
    if noise_level > 0:
        sd = noise_level * clean.mean(axis=0)
        values = clean + sd * rng.standard_normal(clean.shape)
    else:
        sd = np.zeros(clean.shape[1])
    train = Dataset(
        system=spec.name, ic=ic, times=t[idx], values=values, clean_values=clean,
        noise_level=noise_level, density=density if n_points is None else K / pool.size,
        seed=seed, window=(0.0, t_train),
        extra={"noise_sd": sd.tolist(), "pool_seed": pool_seed, "pool_size": int(pool.size), "dt": dt},
    )
    test = Dataset(system=spec.name, ic=ic, times=t, values=x, clean_values=x, window=(0.0, t_end))
    return train, test


@dataclass(frozen=True)
class BenchmarkSetup:
    """Default data-generation settings for one benchmark system."""

    system: str
    ic: tuple
    t_end: float
    dt: float
    train_fraction: float
    pool_fraction: float
    n_points: Optional[int]
    method: str


BENCHMARKS = {
    "lotka-volterra": BenchmarkSetup("lotka-volterra", (1.0, 1.0), 20.0, 1e-3, 0.4, 0.25, None, "implicit-euler"),
    "logistic": BenchmarkSetup("logistic", (0.01,), 9.0, 1e-3, 0.5, 1.0, 10, "adaptive-rk"),
    "black-hole": BenchmarkSetup("black-hole", (0.0, np.pi), 6e4, 1.0, 1.0 / 6.0, 1.0, 500, "adaptive-rk"),
}


def generate_benchmark(system, density=1.0, noise_level=0.0, seed=0, pool_seed=0, n_points=None, ic=None,
                       train_fraction=None):
    """:func:`generate` with the defaults of a registered benchmark."""
    if system not in BENCHMARKS:
        raise KeyError(f"no benchmark setup for {system!r}; known: {sorted(BENCHMARKS)}")
    b = BENCHMARKS[system]
    spec = dynamics.get_system(system)
    n = n_points if n_points is not None else (None if density != 1.0 or b.n_points is None else b.n_points)
    if n is None and b.n_points is not None:
        n = max(1, int(round(density * b.n_points)))
    return generate(
        spec, np.array(b.ic if ic is None else ic, dtype=float), b.t_end, b.dt,
        b.train_fraction if train_fraction is None else train_fraction,
        density=density, noise_level=noise_level, seed=seed, pool_fraction=b.pool_fraction,
        pool_seed=pool_seed, n_points=n, method=b.method,
    )


# Baselines ===================================================================
def finite_difference_derivatives(times, values):
    """Second-order finite differences on a possibly non-uniform grid.

    Central three-point formulas inside, one-sided three-point formulas at
    both ends.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.size < 3:
        raise DegenerateGrid("need at least three points")
    if np.any(np.diff(times) <= 0):
        raise DegenerateGrid("times must be strictly increasing without duplicates")
    return np.gradient(values, times, axis=0, edge_order=2)


def savitzky_golay(values, window=11, poly_order=3, times=None):
    """Local least-squares polynomial smoothing along axis 0.

    Edge frames are fitted with the first/last full window (asymmetric fit).
    If ``times`` is given it must be uniformly spaced.
    """
    values = np.asarray(values, dtype=float)
    if window % 2 == 0 or window <= poly_order:
        raise ValueError("window must be odd and larger than poly_order")
    if values.shape[0] < window:
        raise WindowTooLarge(f"window {window} exceeds series length {values.shape[0]}")
    if times is not None:
        h = np.diff(np.asarray(times, dtype=float))
        if np.ptp(h) > 1e-9 * max(abs(h.mean()), 1e-300):
            raise NonUniformGrid("Savitzky-Golay smoothing needs uniformly spaced times")
    return scipy.signal.savgol_filter(values, window, poly_order, axis=0, mode="interp")


def baseline_linreg(G, d_fd):
    """Ordinary least squares ``argmin ||G theta - d_fd||``."""
    G = np.asarray(G, dtype=float)
    theta, _, rank, _ = np.linalg.lstsq(G, np.asarray(d_fd, dtype=float), rcond=None)
    if rank < G.shape[1]:
        raise SingularSystem(f"design matrix has rank {rank} < {G.shape[1]}")
    return theta
