"""Shared exception hierarchy.

Every error raised by this package derives from :class:`IssuePatchError` so
callers (and the CLI) can distinguish pipeline failures from programming
errors.
"""


class IssuePatchError(Exception):
    """Base class for all package errors."""


class UsageError(IssuePatchError):
    """Caller violated a documented precondition (bad arguments, bad config)."""
