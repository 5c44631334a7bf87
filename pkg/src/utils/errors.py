"""
Exception hierarchy for the demand engine.

Each error family maps onto one CLI exit code (see ``exit_code``).
"""

from typing import Any, Optional


class NfdError(Exception):
    """Base class for all errors raised by the package."""

    exit_code: int = 1


class ConfigError(NfdError, ValueError):
    """Invalid configuration or command usage."""

    exit_code = 1


class DataError(NfdError, ValueError):
    """Input data that cannot be processed (parse errors, empty samples, gaps)."""

    exit_code = 2


class MissingArtifactError(DataError):
    """An upstream artifact is missing; the message names the producing command."""

    def __init__(self, path: Any, command: str):
        super().__init__(f"Missing artifact '{path}'. Run `nfdemand {command}` first.")
        self.path = path
        self.command = command


class NumericalError(NfdError, RuntimeError):
    """Non-finite objective or failed numerical procedure.

    ``state`` carries the last finite state when one exists.
    """

    exit_code = 3

    def __init__(self, message: str, state: Optional[Any] = None):
        super().__init__(message)
        self.state = state


def exit_code(error: BaseException) -> int:
    """Return the CLI exit code for an exception."""
    if isinstance(error, NfdError):
        return error.exit_code
    return 1
