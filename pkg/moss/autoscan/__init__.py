from moss.autoscan.engine import AdmitDecision, AutoscanEngine, ScanReport
from moss.autoscan.evaluators import (
    ChunkEvaluator,
    RunnerChunkEvaluator,
    ScriptedChunkEvaluator,
)
from moss.autoscan.slicer import SessionCursor, SessionRecord, slice_session

__all__ = [
    "AdmitDecision",
    "AutoscanEngine",
    "ChunkEvaluator",
    "RunnerChunkEvaluator",
    "ScanReport",
    "ScriptedChunkEvaluator",
    "SessionCursor",
    "SessionRecord",
    "slice_session",
]
