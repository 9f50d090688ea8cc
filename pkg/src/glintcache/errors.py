"""Exception types raised across the package."""


class GlintCacheError(Exception):
    """Base class for all package errors."""


class FormatError(GlintCacheError, ValueError):
    """A file or byte stream is malformed, truncated or of the wrong kind."""


class ChecksumError(FormatError):
    """A serialized section failed its CRC32 check."""


class FootprintError(GlintCacheError, ValueError):
    """A footprint's support leaves a non-tileable normal map."""

    def __init__(self, message, direction=None):
        super().__init__(message)
        self.direction = direction
