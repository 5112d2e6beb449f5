"""dp-cate - differentially private CATE estimation.

Trade-off curves and their parallel composition, a Gaussian-DP accountant,
a noise-calibrated additive booster, DR-, R- and S-meta-learners, synthetic
simulation setups and a bias/variance experiment harness.
"""

__version__ = "0.3.0"
__license__ = "MIT"

# Package exports
from dp_cate.exceptions import (
    ArityMismatchError,
    ConfigurationError,
    DPCateError,
    EmptyDataError,
    InsufficientDataError,
    InvalidBudgetError,
    InvalidInputError,
    ModelFormatError,
    UnsatisfiableBudgetError,
)

__all__ = [
    "__version__",
    "__license__",
    "ArityMismatchError",
    "ConfigurationError",
    "DPCateError",
    "EmptyDataError",
    "InsufficientDataError",
    "InvalidBudgetError",
    "InvalidInputError",
    "ModelFormatError",
    "UnsatisfiableBudgetError",
]
