"""Exception hierarchy shared across the package."""


class SourceBiasError(Exception):
    """Base class. ``code`` is a short machine-readable tag used by the CLI."""

    code = "ERROR"


class NumericalError(SourceBiasError):
    code = "NUMERICAL"


class SingularUpdate(NumericalError):
    code = "SINGULAR_UPDATE"


class SingularBlock(NumericalError):
    code = "SINGULAR_BLOCK"


class NotSpd(NumericalError):
    code = "NOT_SPD"


class InternalConsistencyError(NumericalError):
    """A closed form disagreed with the generic linear-system route."""

    code = "INCONSISTENT"


class BudgetExceeded(NumericalError):
    code = "BUDGET_EXCEEDED"


class DegenerateMetric(NumericalError):
    code = "DEGENERATE_METRIC"


class ValidationError(SourceBiasError, ValueError):
    """Invalid input. ``issues`` holds ``(code, message)`` pairs, one per violation."""

    code = "VALIDATION"

    def __init__(self, issues):
        self.issues = list(issues)
        if self.issues:
            self.code = self.issues[0][0]
        super().__init__("; ".join(f"{c}: {m}" for c, m in self.issues))

    @property
    def codes(self):
        return [c for c, _ in self.issues]


class InvalidPortfolio(ValidationError):
    pass
