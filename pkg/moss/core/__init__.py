from moss.core.levels import Level, Ordering, level_order
from moss.core.matrix import DeltaReport, matrix_delta
from moss.core.state_store import BatchRepository, RunRepository, StateStore

__all__ = [
    "BatchRepository",
    "DeltaReport",
    "Level",
    "Ordering",
    "RunRepository",
    "StateStore",
    "level_order",
    "matrix_delta",
]
