from moss.pipeline.orchestrator import Orchestrator, StatusReport
from moss.pipeline.verdicts import peak_iteration, plateau_guard, validate_verdict
from moss.pipeline.workspace import GitWorkspace, Workspace

__all__ = [
    "GitWorkspace",
    "Orchestrator",
    "StatusReport",
    "Workspace",
    "peak_iteration",
    "plateau_guard",
    "validate_verdict",
]
