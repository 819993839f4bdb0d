"""Exception types shared across the package.

All of these derive from ``UsageError`` so callers (including the CLI) can
distinguish caller mistakes from genuine I/O or environment failures.
"""


class UsageError(ValueError):
    """The caller violated a documented precondition."""


class ShapeError(UsageError):
    """Operands have incompatible shapes; the message names both."""


class LabelError(UsageError):
    """A class label is outside the valid range."""
