"""
================================================================================
    EPM BENCH - ERRORS
================================================================================

    One exception tree for the whole bench. Every error carries a stable
    `code` (machine-readable, printed by the CLI) and the process exit code
    the CLI uses when the error escapes a subcommand.

    Exit codes:
        0  ok
        1  unexpected error
        2  configuration / usage
        3  validation (rubric, scenario, judge wire, corrupted store)
        4  backend (transport, auth, malformed output, aborted episode)
        5  run store
        6  infeasible sampling strata
        7  numerical kernel (zero resistance, degenerate mapping, empty trajectory)
        8  statistics (insufficient data)
================================================================================
"""

from typing import Any, Dict, Optional


class EpmError(Exception):
    """Base error for the bench"""
    code = "EpmError"
    exit_code = 1

    def __init__(self, message: str = "", **context: Any):
        super().__init__(message or self.code)
        self.message = message or self.code
        self.context: Dict[str, Any] = context

    def to_record(self) -> Dict[str, Any]:
        record = {
            "error": self.code,
            "type": type(self).__name__,
            "message": self.message,
            "exit_code": self.exit_code,
        }
        for key, value in self.context.items():
            record[key] = value if isinstance(value, (str, int, float, bool, type(None))) else str(value)
        return record


# =============================================================================
# CONFIGURATION
# =============================================================================

class ConfigError(EpmError):
    code = "ConfigError"
    exit_code = 2


# =============================================================================
# VALIDATION
# =============================================================================

class ValidationFailed(EpmError):
    code = "ValidationFailed"
    exit_code = 3


class UnknownIndicator(ValidationFailed):
    code = "UnknownIndicator"


class MissingIndicator(ValidationFailed):
    code = "MissingIndicator"


class DuplicateIndicator(ValidationFailed):
    code = "DuplicateIndicator"


class InvalidLevel(ValidationFailed):
    code = "InvalidLevel"


class MissingChannel(ValidationFailed):
    code = "MissingChannel"


class DuplicateChannel(ValidationFailed):
    code = "DuplicateChannel"


class MissingEvidence(ValidationFailed):
    code = "MissingEvidence"


class SchemaIncomplete(ValidationFailed):
    code = "SchemaIncomplete"


class DegenerateScenario(ValidationFailed):
    code = "DegenerateScenario"


class StoreCorrupted(ValidationFailed):
    code = "StoreCorrupted"


# =============================================================================
# BACKENDS
# =============================================================================

class BackendError(EpmError):
    code = "BackendError"
    exit_code = 4


class TransportError(BackendError):
    """Network-level failure; the orchestrator retries the turn once"""
    code = "TransportError"


class AuthMissing(BackendError):
    code = "AuthMissing"


class Timeout(TransportError):
    code = "Timeout"


class RateLimited(TransportError):
    code = "RateLimited"


class MalformedResponse(BackendError):
    code = "MalformedResponse"


class MalformedJudgeOutput(BackendError):
    code = "MalformedJudgeOutput"


class ProgramExhausted(BackendError):
    code = "ProgramExhausted"


class InvalidDirectorAction(BackendError):
    code = "InvalidDirectorAction"


class GeneratorFailure(BackendError):
    code = "GeneratorFailure"


class BackendFailure(BackendError):
    code = "BackendFailure"

    def __init__(self, role: str, cause: BaseException):
        super().__init__(f"{role} backend failed: {cause}", role=role, cause=repr(cause))
        self.role = role
        self.cause = cause


class EpisodeAborted(BackendError):
    """Raised by run_episode; `partial` is the flagged partial result"""
    code = "EpisodeAborted"

    def __init__(self, message: str, partial: Any = None, **context: Any):
        super().__init__(message, **context)
        self.partial = partial


class SteppedAfterDone(EpmError):
    code = "SteppedAfterDone"
    exit_code = 4


# =============================================================================
# STORE
# =============================================================================

class StoreError(EpmError):
    code = "StoreError"
    exit_code = 5


class EmptyStore(StoreError):
    code = "EmptyStore"


class IncompleteRun(StoreError):
    code = "IncompleteRun"


# =============================================================================
# SAMPLING / KERNEL / STATISTICS
# =============================================================================

class InfeasibleStrata(EpmError):
    code = "InfeasibleStrata"
    exit_code = 6

    def __init__(self, deficits: Dict[str, int], message: Optional[str] = None):
        listed = ", ".join(f"{k} (short {v})" for k, v in sorted(deficits.items()))
        super().__init__(message or f"infeasible strata: {listed}")
        self.deficits = dict(deficits)
        self.context["deficits"] = listed


class KernelError(EpmError):
    code = "KernelError"
    exit_code = 7


class ZeroResistance(KernelError):
    code = "ZeroResistance"


class DegenerateSpec(KernelError):
    code = "DegenerateSpec"


class EmptyTrajectory(KernelError):
    code = "EmptyTrajectory"


class InsufficientData(EpmError):
    code = "InsufficientData"
    exit_code = 8


class NoHighPriority(ValidationFailed):
    code = "NoHighPriority"


class MultipleHighPriorities(ValidationFailed):
    code = "MultipleHighPriorities"
