"""Exception types shared across the package."""


class SalpruneError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(SalpruneError):
    """Invalid user-supplied configuration (flags, rates, mixes, taps)."""


class GraphError(SalpruneError):
    """Model graph violates a structural invariant."""


class PlanError(SalpruneError):
    """Pruning plan is inconsistent with the graph it targets."""


class SaliencyError(SalpruneError):
    """Importance computation cannot proceed (e.g. no annotated samples)."""


class TrainingError(SalpruneError):
    """Training diverged or cannot continue."""
