from pydantic import BaseModel

from moss.core.levels import Ordering, level_order
from moss.core.models import KeypointMatrix, MatrixKey
from moss.errors import KeySetMismatch


class DeltaReport(BaseModel):
    improved_keys: list[MatrixKey]
    regressed_keys: list[MatrixKey]
    any_improved: bool
    score_sum: int


def matrix_delta(baseline: KeypointMatrix, candidate: KeypointMatrix) -> DeltaReport:
    """Compare two keypoint matrices over an identical (task, keypoint) key set.

    Raises:
        KeySetMismatch: If the key sets differ, which means a Task-Evaluate
            output drifted from the locked keypoint set.

    """
    baseline_keys = baseline.keys()
    candidate_keys = candidate.keys()
    if baseline_keys != candidate_keys:
        missing = sorted(baseline_keys - candidate_keys)
        extra = sorted(candidate_keys - baseline_keys)
        raise KeySetMismatch(f"keypoint set differs: missing={missing} extra={extra}")

    improved: list[MatrixKey] = []
    regressed: list[MatrixKey] = []
    for key in sorted(baseline_keys):
        order = level_order(candidate.level(key), baseline.level(key))
        if order == Ordering.GREATER:
            improved.append(key)
        elif order == Ordering.LESS:
            regressed.append(key)

    return DeltaReport(
        improved_keys=improved,
        regressed_keys=regressed,
        any_improved=bool(improved),
        score_sum=candidate.score_sum(),
    )
