"""Exception hierarchy for riskmfg."""


class RiskMfgError(Exception):
    """Base class for all riskmfg errors."""


class RejectedInputError(RiskMfgError, ValueError):
    """A numeric input violates a documented precondition."""


class GridTooSmallError(RiskMfgError):
    """Too much mass fell outside the computational window."""

    def __init__(self, clamped_mass: float, threshold: float):
        super().__init__(
            f"clamped mass {clamped_mass:.3e} exceeds threshold {threshold:.1e}; widen the grid"
        )
        self.clamped_mass = clamped_mass
        self.threshold = threshold


class SupportCapError(RiskMfgError):
    """Combined support is too large for the exact transport solver."""

    def __init__(self, size: int, cap: int):
        super().__init__(f"combined support {size} exceeds cap {cap}; subsample first")
        self.size = size
        self.cap = cap


class ConvexityError(RiskMfgError):
    """A function expected to be convex is not, beyond the repair tolerance."""


class AmbiguityError(RiskMfgError, ValueError):
    """An ambiguity set is infeasible or does not match its noise law."""


class ModelError(RiskMfgError):
    """Model data violate a standing assumption."""


class TreeCapError(RiskMfgError):
    """A scenario enumeration would exceed its size cap."""

    def __init__(self, size: int, cap: int):
        super().__init__(f"scenario tree with {size} leaves exceeds cap {cap}")
        self.size = size
        self.cap = cap


class ConfigError(RiskMfgError):
    """The run configuration could not be loaded or validated."""


class ArtifactError(RiskMfgError):
    """Required solve artifacts are missing or unreadable."""
