from moss.trials.scoring import ScoreSummary, aggregate_scores
from moss.trials.workers import (
    IsolationReport,
    TrialHost,
    TrialOutcome,
    TrialPlan,
    TrialTask,
    TrialTranscript,
    run_trials,
)

__all__ = [
    "IsolationReport",
    "ScoreSummary",
    "TrialHost",
    "TrialOutcome",
    "TrialPlan",
    "TrialTask",
    "TrialTranscript",
    "aggregate_scores",
    "run_trials",
]
