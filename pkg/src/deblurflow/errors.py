"""Error types shared across the package.

Each maps to one CLI exit code: InvalidArgumentError and NotFoundError are
usage errors (2), DependencyError is 3, NumericFailureError is 4.
"""


class InvalidArgumentError(ValueError):
    pass


class NotFoundError(FileNotFoundError):
    pass


class DependencyError(RuntimeError):
    """A prerequisite artifact (checkpoint, dataset, variant) is missing."""


class NumericFailureError(RuntimeError):
    """Non-finite value encountered; carries where it happened."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class UnsupportedLayerError(TypeError):
    """Layer kind outside what the MAC counter knows how to cost."""
