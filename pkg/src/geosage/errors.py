"""Exception hierarchy shared by every geosage module."""


class GeoSageError(Exception):
    """Base class for all library errors."""


class DataError(GeoSageError):
    """Input data is unusable (bad file, empty corpus, mismatched dictionaries)."""


class InvalidCoordinate(DataError, ValueError):
    pass


class PointOutsideBbox(DataError, ValueError):
    pass


class NoData(DataError):
    pass


class MalformedInput(DataError):
    """Too many malformed check-in lines; carries the collected records."""

    def __init__(self, malformed, n_lines):
        self.malformed = list(malformed)
        self.n_lines = n_lines
        shown = "; ".join(f"line {m.line}: {m.reason}" for m in self.malformed[:5])
        super().__init__(
            f"{len(self.malformed)} of {n_lines} lines malformed (limit 1%): {shown}"
        )


class VersionMismatch(DataError):
    pass


class CorruptModel(DataError):
    pass


class CorruptCorpus(DataError):
    pass


class EmptyCorpus(DataError):
    pass


class EmptyTestSet(DataError):
    pass


class DictMismatch(DataError):
    pass


class RejectionCapExceeded(DataError):
    pass


class NonFiniteObjective(GeoSageError, ArithmeticError):
    """Raised when the training objective turns NaN or infinite."""
