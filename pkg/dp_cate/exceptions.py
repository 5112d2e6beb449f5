"""Exception classes for private CATE estimation.

This module defines the exception hierarchy used throughout the dp_cate
package, providing specific error types for different failure scenarios.
"""


class DPCateError(Exception):
    """Base exception for all dp_cate operations.

    This is the base class for all exceptions raised by the dp_cate package.
    All other exceptions in this module inherit from this class.
    """

    pass


class InvalidBudgetError(DPCateError):
    """Raised when a privacy budget is malformed or degenerate.

    This exception is raised for negative epsilon, delta outside (0, 1),
    a non-positive Gaussian-DP parameter, or a release plan that cannot be
    calibrated (for example zero releases or a non-positive clip).
    """

    pass


class UnsatisfiableBudgetError(InvalidBudgetError):
    """Raised when no Gaussian-DP parameter matches an (epsilon, delta) pair.

    This exception is raised when the root bracket used to convert an
    (epsilon, delta) budget into mu does not contain a solution, typically
    because delta is too small for the requested epsilon.
    """

    pass


class InvalidInputError(DPCateError):
    """Raised when data handed to a learner violates its preconditions.

    Non-finite features or targets, non-binary labels for the logistic link,
    negative or all-zero weights and propensities outside (0, 1) all raise
    this exception.
    """

    pass


class EmptyDataError(InvalidInputError):
    """Raised when a fit or a partition receives zero rows."""

    pass


class ArityMismatchError(InvalidInputError):
    """Raised when a feature vector does not match the model's dimension.

    This exception is raised by prediction functions when the number of
    supplied features differs from the number of shape functions in the
    fitted model.
    """

    pass


class InsufficientDataError(DPCateError):
    """Raised when a sample split leaves a part too small to use.

    This exception is raised when a partition would create an empty part, or
    when a part has fewer rows than histogram bins. The message suggests a
    smaller bin count or a larger sample.
    """

    pass


class ConfigurationError(DPCateError):
    """Raised when an experiment configuration is invalid or unreadable."""

    pass


class ModelFormatError(DPCateError):
    """Raised when an exported shape document cannot be imported.

    This exception is raised for unknown format identifiers, unsupported
    versions, mismatched edge/value lengths or unknown link names.
    """

    pass
