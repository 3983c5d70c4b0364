"""Exception taxonomy shared across the package.

Validation failures (bad inputs, schema violations, precondition breaches)
map to CLI exit code 1; transport, provider, and IO failures map to exit
code 2.
"""
from __future__ import annotations


class SemiEvolError(Exception):
    """Base class for all package errors."""


class ValidationError(SemiEvolError):
    """Input, schema, or precondition violation."""


class ParseError(ValidationError):
    """Malformed file content; carries the source path and line number."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:" if line is None else f"{path}:{line}: "
        super().__init__(f"{where}{message}")


class TransportError(SemiEvolError):
    """Network-level failure, surfaced after bounded retries."""


class ProviderError(SemiEvolError):
    """Error payload or protocol violation from a backend provider."""


class CapabilityError(SemiEvolError):
    """The backend does not support the requested operation."""


class TemplateError(ValidationError):
    """Prompt rendering left a placeholder unfilled or got bad inputs."""


class SimulationError(SemiEvolError):
    """The simulated backend received a prompt it cannot interpret."""
