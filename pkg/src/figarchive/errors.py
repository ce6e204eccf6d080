"""Exception types shared across pipeline stages."""

from __future__ import annotations


class FigArchiveError(Exception):
    """Base class for all package-specific errors."""


class ParseError(FigArchiveError):
    """Malformed input (CSV, XML, JSON, tar); carries location context."""


class SchemaError(FigArchiveError):
    """Structurally valid input missing a required column/field."""


class ValidationError(FigArchiveError):
    """Input violates a documented invariant (duplicates, bad config)."""


class FetchError(FigArchiveError):
    """Transfer failed after exhausting retries."""

    def __init__(self, message: str, attempts: int = 0):
        super().__init__(message)
        self.attempts = attempts


class TransientTransportError(FigArchiveError):
    """Retriable transport failure (disconnect, timeout)."""


class IntegrityError(FigArchiveError):
    """Downloaded bytes disagree with the size/checksum the remote reported."""


class SecurityError(FigArchiveError):
    """Archive member attempts to escape the extraction directory."""


class ExtractionError(FigArchiveError):
    """Corrupt or unreadable archive."""
