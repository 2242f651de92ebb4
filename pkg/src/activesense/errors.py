"""Exception types raised across the package."""


class ActiveSenseError(Exception):
    """Base class for all package errors."""


class DomainError(ActiveSenseError, ValueError):
    """An argument lies outside the domain of the operation."""


class ContractViolation(ActiveSenseError, ValueError):
    """Inputs are individually valid but inconsistent with each other (shapes, grids)."""


class SynthesisError(ActiveSenseError):
    """A beam pattern specification cannot be met."""


class CalibrationError(ActiveSenseError):
    """Not enough data to calibrate a threshold."""


class ConfigurationError(ActiveSenseError, ValueError):
    """An experiment or acquisition configuration is infeasible."""
