"""Exception types shared across the package."""


class PhaseAnalysisError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PhaseAnalysisError, ValueError):
    """A parameter or configuration value is out of its declared range."""


class ParseError(PhaseAnalysisError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(PhaseAnalysisError, ValueError):
    """File columns do not match the feature schema."""


class DataError(PhaseAnalysisError, ValueError):
    """Values violate a dataset invariant (non-finite, non-consecutive steps, ...)."""


class AlignmentError(PhaseAnalysisError, ValueError):
    """Two inputs that must be index-aligned are not."""


class InsufficientDataError(PhaseAnalysisError, ValueError):
    """Too few samples to fit a model."""


class EmptySubsetError(PhaseAnalysisError, ValueError):
    """A requested branch successor has no observed exits."""


class StageError(PhaseAnalysisError):
    """A pipeline stage failed; wraps the underlying error."""

    def __init__(self, stage, error):
        self.stage = stage
        self.error = error
        super().__init__(f"stage '{stage}' failed: {error}")
