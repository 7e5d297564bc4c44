import json

from pydantic import ValidationError

from moss.core.matrix import matrix_delta
from moss.core.models import EvolutionRun, KeypointMatrix, Verdict, VerdictKind
from moss.errors import StageOutputInvalid
from moss.logger import get_logger
from moss.runners import StageOutput

logger = get_logger("pipeline.verdicts")


def peak_iteration(run: EvolutionRun) -> int | None:
    """Index of the iteration with the highest matrix score_sum; earliest wins ties."""
    best: tuple[int, int] | None = None
    for it in run.iterations:
        if it.matrix is None or it.image is None:
            continue
        score = it.matrix.score_sum()
        if best is None or score > best[1]:
            best = (it.index, score)
    return best[0] if best else None


def plateaued(run: EvolutionRun) -> bool:
    """True when each of the last ``plateau_window`` iterations improved nothing over its predecessor.

    Iteration 1 is compared with the baseline.
    """
    window = run.depth.plateau_window
    matrices: list[KeypointMatrix] = [run.baseline_matrix] if run.baseline_matrix else []
    matrices += [it.matrix for it in run.iterations if it.matrix is not None]
    if len(matrices) < window + 1:
        return False
    recent = matrices[-(window + 1):]
    return not any(matrix_delta(prev, cur).any_improved for prev, cur in zip(recent, recent[1:]))


def plateau_guard(run: EvolutionRun, verdict: Verdict) -> Verdict:
    """Downgrade NEED_MORE_WORK to a forced CONVERGED at the peak iteration once progress stalls."""
    if verdict.kind != VerdictKind.NEED_MORE_WORK or not plateaued(run):
        return verdict
    peak = peak_iteration(run)
    if peak is None:
        return verdict
    run.peak_iteration = peak
    run.candidate_image = run.iteration(peak).image
    logger.info(
        f"run {run.run_id}: no keypoint improved for {run.depth.plateau_window} iterations; "
        f"forcing convergence at iteration {peak}"
    )
    return Verdict(
        kind=VerdictKind.CONVERGED,
        rationale=f"plateau over {run.depth.plateau_window} iterations; peak at iteration {peak}. {verdict.rationale}".strip(),
        forced_by_plateau=True,
    )


def validate_verdict(output: StageOutput, run: EvolutionRun) -> Verdict:
    """Parse the verdict stage output and apply the plateau guard.

    Raises:
        StageOutputInvalid: On a failed invocation, non-JSON body or unknown verdict kind.

    """
    if not output.ok:
        raise StageOutputInvalid(f"verdict exited {output.exit_status}")
    try:
        data = json.loads(output.body)
        verdict = Verdict(kind=data["verdict"], rationale=data.get("rationale", ""))
    except (ValueError, KeyError, TypeError, ValidationError) as e:
        raise StageOutputInvalid(f"invalid verdict output: {e}") from e
    return plateau_guard(run, verdict)
