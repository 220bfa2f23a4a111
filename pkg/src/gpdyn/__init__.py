"""Learning parametrised dynamical systems from scarce, noisy trajectories.

Each state component is emulated by a Gaussian process whose derivative
estimate and derivative precision define a likelihood for the right-hand
side parameters.  Affine parametrisations get a closed-form Gaussian
posterior; nonlinear ones are sampled with Metropolis-Hastings.
"""

from .errors import DataError, GPDynError, NumericalError
from .gp import GPStateModel, fit_hyperparameters
from .kernels import GramBlocks, SEKernel, assemble

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "GPDynError",
    "NumericalError",
    "GPStateModel",
    "fit_hyperparameters",
    "GramBlocks",
    "SEKernel",
    "assemble",
    "__version__",
]
