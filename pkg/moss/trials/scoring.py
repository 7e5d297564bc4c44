"""External-grader score aggregation.

Numeric scores come from an outside grader and are reported alongside the
qualitative matrices; the evolution loop itself never consumes them.
"""

import numpy as np
from pydantic import BaseModel

from moss.errors import EmptyScores

REPORT_DECIMALS = 4


class ScoreSummary(BaseModel):
    per_task_mean: dict[str, float]
    overall_mean: float


def aggregate_scores(per_task_trial_scores: dict[str, list[float]]) -> ScoreSummary:
    """Per-task mean over trials, overall mean over the per-task means.

    Raises:
        EmptyScores: If there are no tasks or a task has no scores.

    """
    if not per_task_trial_scores:
        raise EmptyScores("no tasks to aggregate")
    empty = [task for task, scores in per_task_trial_scores.items() if not scores]
    if empty:
        raise EmptyScores(f"tasks without scores: {', '.join(empty)}")

    means = {task: float(np.mean(scores)) for task, scores in per_task_trial_scores.items()}
    overall = float(np.mean(list(means.values())))
    return ScoreSummary(
        per_task_mean={task: round(mean, REPORT_DECIMALS) for task, mean in means.items()},
        overall_mean=round(overall, REPORT_DECIMALS),
    )
