"""Exception types shared across the package."""


class CoxSdeError(Exception):
    """Base class for all package errors."""


class NonFiniteState(CoxSdeError):
    """A simulated state became NaN or infinite (drift blow-up or step too coarse)."""


class NonFiniteGradient(CoxSdeError):
    """A gradient estimate contains NaN or infinite entries."""


class HorizonExceedsGrid(CoxSdeError):
    """Conditioning horizon lies beyond the simulation grid."""


class EventBeyondHorizon(CoxSdeError):
    """An event time lies beyond the requested likelihood horizon."""


class ShapeMismatch(CoxSdeError):
    """Array shapes incompatible with the network or operation."""


class GridMismatch(CoxSdeError):
    """Two objects that must share a time grid do not."""


class SizeMismatch(CoxSdeError):
    """Ensembles must have equal size for optimal matching."""


class EmptyEnsemble(CoxSdeError):
    """Operation requires at least one path."""


class InsufficientReplications(CoxSdeError):
    """Dispersion statistics need at least two replications."""


class DegenerateEstimate(CoxSdeError):
    """Inner Monte Carlo mean underflowed; the score estimate is undefined."""


class ConfigError(CoxSdeError):
    """Invalid or missing configuration field.

    `field` names the offending entry so the CLI can report it.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"config field '{field}': {message}")


class ZeroAcceptanceWarning(UserWarning):
    """MCMC acceptance rate collapsed during burn-in."""
