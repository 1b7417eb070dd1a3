"""Batched FMM translation and fast Gauss transform kernels with brute-force oracles."""

__version__ = "0.1.0"

from . import core, fgt, fmm, perfmodel  # noqa: E402
from ._backend import backend_name  # noqa: E402
from .errors import (  # noqa: E402
    ChipSpecError,
    FastSumError,
    InvalidArgumentError,
    OutOfDomainError,
    PlanConsistencyError,
    RangeError,
    SingularTranslationError,
)

__all__ = [
    "__version__",
    "backend_name",
    "core",
    "fgt",
    "fmm",
    "perfmodel",
    "ChipSpecError",
    "FastSumError",
    "InvalidArgumentError",
    "OutOfDomainError",
    "PlanConsistencyError",
    "RangeError",
    "SingularTranslationError",
]
