"""Exception hierarchy shared by every stage of the pipeline."""


class RouterAdError(Exception):
    """Base class for all data/config errors raised by routerad."""


class ConfigError(RouterAdError):
    def __init__(self, field: str, reason: str):
        super().__init__(f"invalid configuration: {field}: {reason}")
        self.field = field


class TraceParseError(RouterAdError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class SchemaError(RouterAdError):
    """Required input columns could not be resolved."""

    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing required column(s): " + ", ".join(self.missing))


class AlignmentError(RouterAdError):
    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


def _listing(names, limit=8):
    shown = ", ".join(names[:limit])
    return shown + (f" (+{len(names) - limit} more)" if len(names) > limit else "")


class SchemaMismatchError(RouterAdError):
    """Feature columns do not match those a model was trained on."""

    def __init__(self, missing, unexpected, reordered=()):
        self.missing = list(missing)
        self.unexpected = list(unexpected)
        self.reordered = list(reordered)
        parts = []
        if self.missing:
            parts.append("missing columns: " + _listing(self.missing))
        if self.unexpected:
            parts.append("unexpected columns: " + _listing(self.unexpected))
        if self.reordered:
            parts.append("columns out of order: " + _listing(self.reordered))
        super().__init__("feature schema mismatch; " + "; ".join(parts))


class EmptyDataError(RouterAdError):
    pass


class InsufficientDataError(RouterAdError):
    pass


class ContaminationError(RouterAdError):
    """Malicious rows were passed to one-class training."""


class UndefinedMetricError(RouterAdError):
    pass


class ConvergenceError(RouterAdError):
    def __init__(self, iterations: int, violation: float):
        super().__init__(
            f"solver did not converge in {iterations} iterations "
            f"(final KKT violation {violation:.3e})"
        )
        self.iterations = iterations
        self.violation = violation


class ModelFormatError(RouterAdError):
    """Base for unreadable or corrupt model files."""


class ChecksumError(ModelFormatError):
    pass


class VersionError(ModelFormatError):
    pass


class ModelInvariantError(ModelFormatError):
    pass
