"""Exception hierarchy shared by the solver, the engine and the CLI.

CLI-facing errors carry an ``exit_code`` so commands can map failures to the
documented process exit status without inspecting messages.
"""

from __future__ import annotations

from typing import Any, Optional


class ReallocationError(Exception):
    """Base class for all errors raised by this package."""

    exit_code: int = 4


class DomainViolationError(ReallocationError, ValueError):
    """An evaluation point left the strict interior of the local constraints."""


class InstanceError(ReallocationError, ValueError):
    """A problem instance is malformed or a generator rejected its inputs."""

    exit_code = 3


class InitializationError(ReallocationError):
    """No feasible initial resource shares could be produced."""


class SolverError(ReallocationError):
    """A local solve stopped without meeting its tolerances."""

    def __init__(self, message: str, result: Optional[Any] = None):
        super().__init__(message)
        self.result = result


class NeighborhoodInfeasibleError(SolverError):
    """A neighborhood program had no strictly feasible point.

    This cannot happen while the engine invariants hold, so it is raised with a
    diagnostic payload (leader id, shares, iterates) instead of being reported
    as a status.
    """

    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class OracleError(ReallocationError):
    """A centralized reference computation failed."""


class ConfigParseError(ReallocationError):
    """A configuration or instance file could not be parsed."""

    exit_code = 2


class ConfigSchemaError(ReallocationError):
    """A configuration document parsed but does not match the schema."""

    exit_code = 3


class ValidationFailedError(ReallocationError):
    """An instance failed one or more validation checks."""

    exit_code = 3

    def __init__(self, message: str, report: Optional[Any] = None):
        super().__init__(message)
        self.report = report


class RunFailure(ReallocationError):
    """An experiment run aborted because the engine or oracle failed."""

    exit_code = 4
