"""Exception types shared across the package."""


class GraphKVError(Exception):
    """Base class for all errors raised by graphkv."""


class DomainError(GraphKVError, ValueError):
    """An argument is outside the domain an operation is defined on."""


class GraphParseError(GraphKVError):
    def __init__(self, source: str, line: int, message: str):
        self.source = source
        self.line = line
        super().__init__(f"{source}:{line}: {message}")


class GraphIntegrityError(GraphKVError):
    """The parsed graph violates a structural invariant (e.g. dangling edge)."""


class CapacityError(GraphKVError):
    """A sequence would exceed the model's maximum context length."""


class SealedSegmentError(GraphKVError, RuntimeError):
    """Attempted write into a sealed (shared, read-only) KV segment."""


class ProvenanceError(GraphKVError):
    """Two reports cannot be compared because they come from different runs."""
