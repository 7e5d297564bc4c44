"""Domain errors shared by every moss component.

Each error carries a stable snake_case ``code`` used verbatim in RPC error
responses and HTTP error details.
"""


class MossError(Exception):
    code = "moss_error"

    def __init__(self, message: str = "") -> None:
        super().__init__(message or self.code)
        self.message = message or self.code

    def as_detail(self) -> dict[str, str]:
        return {"code": self.code, "message": self.message}


# core
class IoFailure(MossError):
    code = "io_failure"


class KeySetMismatch(MossError):
    code = "key_set_mismatch"


class InvalidTransition(MossError):
    code = "invalid_transition"


class ConcurrentUpdate(MossError):
    """A document was saved from a copy older than the one on disk."""

    code = "concurrent_update"


# autoscan
class MalformedRecord(MossError):
    code = "malformed_record"


class UnknownSession(MossError):
    code = "unknown_session"


class EvaluatorFailure(MossError):
    code = "evaluator_failure"


# pipeline
class RunAlreadyActive(MossError):
    code = "run_already_active"


class NoEligibleBatch(MossError):
    code = "no_eligible_batch"


class StageOutputInvalid(MossError):
    code = "stage_output_invalid"


class BudgetExhausted(MossError):
    code = "budget_exhausted"


class BuildFailed(MossError):
    code = "build_failed"


class ImplementNoCommit(MossError):
    code = "implement_no_commit"


class UnknownRun(MossError):
    code = "unknown_run"


class UnknownBatch(MossError):
    code = "unknown_batch"


class RunNotActive(MossError):
    code = "run_not_active"


class RunActive(MossError):
    code = "run_active"


class AmbiguousApply(MossError):
    code = "ambiguous_apply"

    def __init__(self, message: str, candidates: list[str]) -> None:
        super().__init__(message)
        self.candidates = candidates

    def as_detail(self) -> dict:
        return {**super().as_detail(), "candidates": self.candidates}


class RunStopped(MossError):
    """Raised at a stage boundary once a stop request has been observed, or when a stop cancels the running stage."""

    code = "run_stopped"


# runners
class UnknownProvider(MossError):
    code = "unknown_provider"


class LaunchFailure(MossError):
    code = "launch_failure"


class MalformedScript(MossError):
    code = "malformed_script"


# hostd
class RuntimeFailure(MossError):
    code = "runtime_failure"


class DeliveryFailed(MossError):
    code = "delivery_failed"


class UnknownOp(MossError):
    code = "unknown_op"


# trials
class WorkerSpawnFailed(MossError):
    code = "worker_spawn_failed"


class IsolationViolation(MossError):
    code = "isolation_violation"


class EmptyScores(MossError):
    code = "empty_scores"


# transports
class TransportFailure(MossError):
    """The peer (hostd socket or HTTP endpoint) could not be reached."""

    code = "transport_failure"


class MalformedFrame(MossError):
    code = "malformed_frame"


# sandbox
class UnknownScenario(MossError):
    code = "unknown_scenario"


ERRORS_BY_CODE: dict[str, type[MossError]] = {
    cls.code: cls
    for cls in [
        IoFailure,
        KeySetMismatch,
        InvalidTransition,
        ConcurrentUpdate,
        MalformedRecord,
        UnknownSession,
        EvaluatorFailure,
        RunAlreadyActive,
        NoEligibleBatch,
        StageOutputInvalid,
        BudgetExhausted,
        BuildFailed,
        ImplementNoCommit,
        UnknownRun,
        UnknownBatch,
        RunNotActive,
        RunActive,
        AmbiguousApply,
        RunStopped,
        UnknownProvider,
        LaunchFailure,
        MalformedScript,
        RuntimeFailure,
        DeliveryFailed,
        UnknownOp,
        WorkerSpawnFailed,
        IsolationViolation,
        EmptyScores,
        TransportFailure,
        MalformedFrame,
        UnknownScenario,
    ]
}


def error_from_detail(detail: dict) -> MossError:
    """Rebuild a domain error from an RPC/HTTP error detail."""
    cls = ERRORS_BY_CODE.get(detail.get("code", ""), MossError)
    if cls is AmbiguousApply:
        return AmbiguousApply(detail.get("message", ""), detail.get("candidates", []))
    return cls(detail.get("message", ""))
