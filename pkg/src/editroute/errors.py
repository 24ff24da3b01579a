"""Exception hierarchy shared by the library, the CLI and the HTTP service."""

from __future__ import annotations

from typing import Any


class EditRouteError(Exception):
    """Base class. ``code`` maps onto the service error codes and CLI exit status."""

    code = "bad_request"
    exit_status = 2

    def __init__(self, message: str, detail: dict[str, Any] | None = None) -> None:
        super().__init__(message)
        self.message = message
        self.detail = detail


class SchemaError(EditRouteError):
    """A file or payload does not follow its declared format."""

    code = "schema_error"
    exit_status = 3

    def __init__(self, message: str, line: int | None = None, field: str | None = None) -> None:
        detail: dict[str, Any] = {}
        if line is not None:
            detail["line"] = line
            message = f"line {line}: {message}"
        if field is not None:
            detail["field"] = field
        super().__init__(message, detail or None)
        self.line = line
        self.field = field


class BackendUnavailable(EditRouteError):
    """A completion, embedding or scoring endpoint could not be reached."""

    code = "backend_unavailable"
    exit_status = 4


class AugmentationError(BackendUnavailable):
    """The augmentation backend failed before any reply was obtained."""


class EmbeddingError(BackendUnavailable):
    pass


class RoutingError(BackendUnavailable):
    """A backend failed after the route decision was taken.

    The decision is kept so locality audits still see the intended path.
    """

    def __init__(self, message: str, decision: Any) -> None:
        detail = decision.to_dict() if hasattr(decision, "to_dict") else None
        super().__init__(message, detail)
        self.decision = decision


class NotTrainedError(EditRouteError):
    """No usable relevance filter: missing weights, or single-class training data."""

    code = "not_trained"
    exit_status = 5


class ConfigError(EditRouteError):
    code = "bad_request"
    exit_status = 2
