from __future__ import annotations

from pathlib import Path
from typing import Any, Dict, Optional, Union


class SawoptoError(Exception):
    """Base class for every error raised by the toolkit."""


class DomainError(SawoptoError, ValueError):
    pass


class ConfigError(SawoptoError, ValueError):
    pass


class DataFormatError(SawoptoError, ValueError):
    def __init__(
        self,
        message: str,
        path: Optional[Union[str, Path]] = None,
        line: Optional[int] = None,
        column: Optional[Union[int, str]] = None,
    ) -> None:
        self.path = str(path) if path is not None else None
        self.line = line
        self.column = column
        location = ""
        if self.path:
            location = self.path
        if line is not None:
            location += f":{line}"
        if column is not None:
            location += f" (column {column})"
        super().__init__(f"{location}: {message}" if location else message)


class FitError(SawoptoError, RuntimeError):
    pass


class ConvergenceError(FitError):
    def __init__(self, message: str, last_iterate: Optional[Dict[str, Any]] = None) -> None:
        self.last_iterate = dict(last_iterate or {})
        super().__init__(message)


class NoSignalError(FitError):
    pass


class InsufficientDataError(FitError):
    pass
