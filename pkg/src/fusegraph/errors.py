"""Exception hierarchy shared across the package.

Config errors map to CLI exit code 1, data errors to exit code 2.
"""


class FusegraphError(Exception):
    """Base class for all package errors."""


class ConfigError(FusegraphError):
    """Invalid parameter combination or malformed configuration."""


class DataFormatError(FusegraphError):
    """A persisted file violates its format contract."""

    def __init__(self, message: str, path=None, line_no: int | None = None):
        loc = ""
        if path is not None:
            loc = f" [{path}" + (f":{line_no}" if line_no is not None else "") + "]"
        super().__init__(message + loc)
        self.path = path
        self.line_no = line_no


class NegativeScoreError(DataFormatError):
    """A score or similarity value is negative."""


class DuplicateEntryError(DataFormatError):
    """The same (row, column) or identifier appears twice."""


class UnknownDocumentError(DataFormatError):
    """A referenced document id is not part of the collection."""


class EmptyTextResultError(FusegraphError):
    """The text query matched no documents; the query cannot be answered."""

    def __init__(self, query_id: str = ""):
        super().__init__(f"query {query_id!r} has no nonzero text scores" if query_id
                         else "score vector has no nonzero entries")
        self.query_id = query_id


class ZeroMassError(FusegraphError):
    """A vector that must carry positive mass is identically zero."""


class NotConvergedError(FusegraphError):
    """An iterative process hit its iteration cap before converging."""

    def __init__(self, iterations: int, last_delta: float):
        super().__init__(
            f"no convergence after {iterations} iterations (last L1 delta {last_delta:.3e})")
        self.iterations = iterations
        self.last_delta = last_delta


class MissingLocationsError(FusegraphError):
    """Descriptors lack the (x, y) locations needed for spatial pooling."""
