"""Exception types shared across the package."""


class Error(Exception):
    """Base class for all package-specific errors."""


class ArchitectureError(Error):
    """A layer stack violates a structural invariant."""


class ShapeError(Error):
    """A tensor does not have the shape an operation requires."""


class IncompatibilityError(Error):
    """Two architectures cannot be aligned with each other."""


class UnsupportedTransformError(Error):
    """The requested structural transformation is not defined here."""


class IdxFormatError(Error):
    """An IDX file is malformed, truncated, or inconsistent."""


class ConfigError(Error):
    """An experiment config is missing keys or violates an invariant."""
