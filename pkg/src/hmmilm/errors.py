"""Exception types shared across the package."""


class HmmIlmError(Exception):
    """Base class for all package errors."""


class InputError(HmmIlmError):
    """Structurally invalid input (dimension mismatch, bad index, ...)."""


class ParameterDomainError(HmmIlmError):
    """Parameter value outside the domain a formula requires."""


class FilterDegeneracyError(HmmIlmError):
    """All three filtered probabilities vanished at some time step.

    Signals an impossible conditioning configuration; the state
    initializer is responsible for preventing this.
    """

    def __init__(self, individual, t, message=None):
        self.individual = individual
        self.t = t
        super().__init__(
            message
            or f"filter degenerated for individual {individual} at t={t}"
        )


class InitializationError(HmmIlmError):
    """No latent state configuration with positive density exists."""


class DataFormatError(HmmIlmError):
    """Malformed data file or CSV row."""


class ConfigError(HmmIlmError):
    """Invalid run configuration."""
