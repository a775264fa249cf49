"""Exception hierarchy for the package."""


class FracheatError(Exception):
    """Base class for all package errors."""


class DomainError(FracheatError, ValueError):
    """An argument lies outside the mathematical domain (e.g. t <= 0)."""


class ContractError(FracheatError, ValueError):
    """A documented precondition between components is violated."""


class ResolutionError(FracheatError):
    """A requested tolerance is unattainable with the given discretization."""

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


class AccuracyError(FracheatError):
    """An iterative evaluation failed to converge to the requested accuracy."""

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


class DivergenceError(FracheatError):
    """A time-stepping run produced a non-finite value."""

    def __init__(self, message, path_index=None, state_index=None):
        super().__init__(message)
        self.path_index = path_index
        self.state_index = state_index


class ConfigError(FracheatError, ValueError):
    """A run configuration failed schema validation."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
