"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes do not match the action grid or Brownian dimension."""


class DomainError(ValueError):
    """An argument lies outside the set where an operation is defined."""


class SimulationDivergedError(FloatingPointError):
    """A simulated path produced a non-finite value or an exponent overflow."""

    def __init__(self, message, scenario=None, step=None):
        super().__init__(message)
        self.scenario = scenario
        self.step = step


class SolverError(RuntimeError):
    """A backward solver could not produce a solution (e.g. singular regression)."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConfigError(ValueError):
    """A run configuration could not be parsed or validated."""


class SchemaMismatchError(ValueError):
    """Two artifacts compared with each other do not share a layout."""
