"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes, so modules raise the most specific type
rather than bare ValueError wherever the failure is user-addressable.
"""

from __future__ import annotations


class Anima4dError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(Anima4dError):
    """Unknown key, malformed value, or inconsistent configuration."""


class DataFormatError(Anima4dError):
    """Corrupt or out-of-contract file content (images, manifests, checkpoints)."""


class InvalidInputError(Anima4dError):
    """Caller passed values that violate an operation's input contract."""


class ProtocolError(Anima4dError):
    """Remote guidance reply was malformed or inconsistent; not retryable."""


class RetryableTransportError(Anima4dError):
    """Transient transport failure (timeout, dropped connection); safe to retry."""
