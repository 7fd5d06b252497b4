"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class DVFError(Exception):
    exit_code = 1


class ConfigurationError(DVFError, ValueError):
    exit_code = 2


class DataError(DVFError):
    exit_code = 3


class ManifestError(DataError):
    pass


class ProviderError(DVFError):
    """Detection provider failure. ``status`` is the HTTP status when one was received."""

    exit_code = 4

    def __init__(self, message: str, *, status: int | None = None, cause: BaseException | None = None):
        super().__init__(message)
        self.status = status
        self.cause = cause


class NumericsError(DVFError, ArithmeticError):
    exit_code = 5


class GeometryError(DVFError, ValueError):
    pass


class ShapeError(DVFError, ValueError):
    pass


class LabelError(DVFError, KeyError):
    pass


class InternalError(DVFError, RuntimeError):
    pass
