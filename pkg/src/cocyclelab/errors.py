"""Exception types shared across the package."""


class CocycleLabError(Exception):
    """Base class for all package errors."""


class BudgetError(CocycleLabError):
    """A bounded search or retry loop exhausted its budget."""


class TowerError(CocycleLabError):
    """A disjoint tower could not be built at the requested height."""


class OverflowGuardError(CocycleLabError):
    """A raw matrix product exceeded the representable range; use the scaled API."""


class RankLossError(CocycleLabError):
    """A matrix acting on a subspace was numerically rank-deficient."""


class CutLocusError(CocycleLabError):
    """Geodesic endpoints at or near the cut locus; the shortest path is ambiguous."""


class AliasingError(CocycleLabError):
    """Path samples are too far apart for unambiguous lifting or classification."""


class HomotopyClassError(CocycleLabError):
    """A topological obstruction: the requested homotopy class does not match."""


class InvariancePreconditionError(CocycleLabError):
    """A section expected to be (almost) invariant failed its defect tolerance."""


class ConfigError(CocycleLabError):
    """An experiment configuration failed schema validation."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"config field '{field}': {message}")
