"""Exception hierarchy and the CLI exit-code contract."""

from __future__ import annotations

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class GaugeError(Exception):
    """Base class for every error raised by gaugekit."""

    exit_code = EXIT_USAGE


class DomainError(GaugeError, ValueError):
    """An argument lies outside the domain of a function."""


class SpecificationError(DomainError):
    """Invalid specification limits (UL <= LL or kappa <= 0)."""


class ConfigError(GaugeError, ValueError):
    """Invalid simulation configuration."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DataError(GaugeError, ValueError):
    """Malformed, unbalanced or non-finite measurement data."""

    exit_code = EXIT_DATA


class NumericError(GaugeError, ArithmeticError):
    """A numerical evaluation could not be carried out."""

    exit_code = EXIT_NUMERIC


class DegenerateDataError(NumericError):
    """Data with zero within-unit variation (MS_eps = 0)."""


class MomentUndefinedError(NumericError):
    """A requested moment does not exist for the given degrees of freedom."""


class DegenerateTruncationError(NumericError):
    """Truncation point leaves (numerically) no probability mass."""


class ConvergenceError(NumericError):
    """An iterative or quadrature routine failed to converge."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class NotApplicableError(NumericError):
    """An interval construction does not apply to this estimate."""


class DegenerateDataWarning(UserWarning):
    """Data are degenerate but a result could still be produced."""


class DesignWarning(UserWarning):
    """The study design is outside recommended practice (e.g. a <= 2)."""
