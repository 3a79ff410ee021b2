"""Exception hierarchy for relmatch."""


class RelmatchError(Exception):
    """Base class for all relmatch errors."""


class InputError(RelmatchError):
    """Bad user input: files, catalogs, tables, parameters."""


class MalformedCatalog(InputError):
    pass


class InvalidCatalog(InputError):
    def __init__(self, message: str, relation_id: str | None = None) -> None:
        super().__init__(message)
        self.relation_id = relation_id


class MalformedCsv(InputError):
    pass


class EmptyTable(InputError):
    pass


class InvalidPolicy(InputError):
    pass


class InvalidParams(InputError):
    pass


class VectorIndexError(RelmatchError):
    """Raised by vector index construction and queries."""


class EmptyInput(VectorIndexError):
    pass


class DimensionMismatch(VectorIndexError):
    pass


class DuplicateId(VectorIndexError):
    pass


class IoFailure(VectorIndexError):
    pass


class CorruptIndex(VectorIndexError):
    pass


class ProviderUnavailable(RelmatchError):
    """Embedding provider could not be reached (retryable)."""


class BackendUnavailable(RelmatchError):
    """Classification backend failed after the retry budget was spent."""


class ParseError(RelmatchError):
    def __init__(self, message: str, raw_text: str) -> None:
        super().__init__(message)
        self.raw_text = raw_text


class MissingDistance(RelmatchError):
    pass


class UnknownNode(RelmatchError):
    pass


class TransportError(RelmatchError):
    """A single backend call failed at the transport level; eligible for retry."""
