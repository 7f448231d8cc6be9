"""f-divergence generative modeling.

A generator, an inference network and an exact-density estimator trained
jointly by a single minimax Monte Carlo objective, with pluggable
f-divergences and a closed-form linear-Gaussian oracle for verification.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DomainError, FgmError, NumericalError, ShapeError
from .fdiv import KERNEL_NAMES, KERNELS, FDivergenceKernel, kernel_by_name

__all__ = [
    "ConfigError",
    "DomainError",
    "FgmError",
    "NumericalError",
    "ShapeError",
    "FDivergenceKernel",
    "KERNELS",
    "KERNEL_NAMES",
    "kernel_by_name",
    "__version__",
]
