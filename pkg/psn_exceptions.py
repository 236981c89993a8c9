"""
Custom exceptions for the stochastic physical neuron toolkit.

Provides specific exception types so the CLI can map failures to exit codes.
"""


class PsnError(Exception):
    """Base exception for all stochastic-neuron errors."""
    pass


class ConfigurationError(PsnError):
    """Raised when a configuration or estimator/model combination is invalid."""
    pass


class PathConfigurationError(ConfigurationError):
    """Raised when there are issues with path configuration."""
    pass


class DomainError(PsnError, ValueError):
    """Raised when an argument lies outside an operation's domain."""
    pass


class ShapeError(PsnError, ValueError):
    """Raised when array shapes do not match."""
    pass


class NumericError(PsnError, ArithmeticError):
    """Raised when a non-finite value appears during forward or update."""
    pass


class InternalConsistencyError(PsnError):
    """Raised when a closed-form result fails its own sanity checks."""
    pass


class PhysicsViolationError(PsnError):
    """Raised when an integrated physical quantity leaves its allowed range."""
    pass


class DegenerateJacobianError(PsnError):
    """Raised when an empirical softmax Jacobian is built from unsmoothed zeros."""
    pass


class ContractError(PsnError):
    """Raised when a forward trace lacks fields the backward rule requires."""
    pass


class DataFormatError(PsnError):
    """Raised when a dataset file is malformed, truncated or fails verification."""
    pass


class PhysicsValidationError(PsnError):
    """Raised when a physics oracle check exceeds its tolerance."""
    pass
