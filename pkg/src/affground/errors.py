"""Shared exception types."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration value violates its documented constraints."""


class ValidationError(ValueError):
    """A dataset manifest or record failed validation."""


class GradientCheckError(ArithmeticError):
    """A finite-difference gradient probe produced a non-finite value."""
