"""Exception hierarchy shared across the toolkit."""


class PageMineError(Exception):
    """Base class for all toolkit errors."""


class CoordSpaceError(PageMineError):
    """Two geometric values live in different coordinate spaces."""


class DimensionError(PageMineError):
    """A raster or grid has unusable dimensions."""


class MalformedRLEError(PageMineError):
    """A run-length encoded mask violates its structural invariants."""


class IngestError(PageMineError):
    """An input file could not be read or parsed."""


class FormatError(PageMineError):
    """An image has an unsupported pixel format."""


class EmptyPromptError(PageMineError):
    """A prompt parsed down to zero phrases."""


class UsageError(PageMineError):
    """An operation was called with arguments that break its contract."""


class CastingError(PageMineError):
    """A class-cast mapping does not cover a class present in the data."""


class ExportError(PageMineError):
    """A dataset export could not be completed."""


class BackendError(PageMineError):
    """Transport-level failure talking to a model backend; retryable."""


class ProtocolError(PageMineError):
    """The backend answered, but the payload violates the wire contract.

    Never retried: a malformed response is a bug, not a flaky network.
    """

    def __init__(self, message: str, payload_excerpt: str | None = None):
        if payload_excerpt:
            message = f"{message} (payload: {payload_excerpt})"
        super().__init__(message)
        self.payload_excerpt = payload_excerpt


class FixtureNotFoundError(PageMineError):
    """No recorded fixture exists for the requested key."""

    def __init__(self, kind: str, key: str, fixture_root: str):
        super().__init__(f"no {kind} fixture {key!r} under {fixture_root}")
        self.kind = kind
        self.key = key
        self.fixture_root = fixture_root
