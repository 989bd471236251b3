"""Exception hierarchy shared by the library and the command line."""


class AiwashError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(AiwashError, ValueError):
    """Invalid run configuration, lexicon, rubric or schema file."""

    exit_code = 2


class DataError(AiwashError, ValueError):
    """Input data violate a documented contract."""

    exit_code = 3


class SchemaError(DataError):
    """Required columns are missing from a tabular input."""

    def __init__(self, missing, message=None):
        self.missing = list(missing)
        super().__init__(message or f"missing required column(s): {', '.join(self.missing)}")


class DuplicateKeyError(DataError):
    """Two rows share the same (firm_id, quarter) key."""


class EstimationError(AiwashError, RuntimeError):
    """An estimator could not produce a result."""

    exit_code = 4


class CollinearityError(EstimationError):
    """Design matrix is rank deficient."""

    def __init__(self, columns, message=None):
        self.columns = list(columns)
        super().__init__(message or f"collinear regressor(s): {', '.join(map(str, self.columns))}")


class ConvergenceError(EstimationError):
    """Iterative demeaning did not reach tolerance within the sweep cap."""

    def __init__(self, sweeps, change):
        self.sweeps = sweeps
        self.change = change
        super().__init__(f"demeaning did not converge after {sweeps} sweeps (max change {change:.3e})")


class ScorerError(AiwashError, RuntimeError):
    """External exaggeration scorer failed or violated the wire protocol."""


class ProtocolError(ScorerError):
    """Malformed or out-of-range scorer response."""
