"""Stage prompts and stage-output contracts.

Prompts are rendered from the Jinja templates next to this module. Outputs
are validated here; any contract violation raises ``StageOutputInvalid``.
"""

import enum
import json
from pathlib import Path

from jinja2 import Environment, FileSystemLoader
from pydantic import BaseModel, ValidationError

from moss.core.levels import Level
from moss.core.matrix import matrix_delta
from moss.core.models import Batch, KeypointMatrix, StageName
from moss.errors import KeySetMismatch, StageOutputInvalid
from moss.runners import StageOutput

TEMPLATES_DIR = Path(__file__).parent / "templates"


def load_prompt_template(template_name: str, **context) -> str:
    """Render a stage prompt template with the given context variables."""
    env = Environment(
        loader=FileSystemLoader(str(TEMPLATES_DIR)),
        trim_blocks=True,
        lstrip_blocks=True,
    )
    return env.get_template(template_name).render(**context)


def render_stage_prompt(stage: StageName, **context) -> str:
    return load_prompt_template(f"{stage.value}.j2", **context)


def evidence_context(batch: Batch) -> list[dict]:
    """Batch chunks grouped by task, in first-seen task order."""
    tasks: dict[str, dict] = {}
    for chunk in batch.chunks:
        task = tasks.setdefault(chunk.task_id, {"task_id": chunk.task_id, "prompt": chunk.task_prompt, "chunks": []})
        task["chunks"].append(
            {
                "chunk_id": chunk.chunk_id,
                "turn_span": chunk.turn_span,
                "deficient": [t.keypoint_name for t in chunk.keypoint_tags if t.level.is_deficient()],
                "transcript": [e.model_dump(mode="json") for e in chunk.transcript],
            }
        )
    return list(tasks.values())


class GateDecision(enum.Enum):
    APPROVE = "approve"
    REJECT_OFF_TARGET = "reject_off_target"
    REJECT_TOO_NARROW = "reject_too_narrow"
    REJECT = "reject"


GATE_DECISIONS = {
    StageName.PLAN_REVIEW: {GateDecision.APPROVE, GateDecision.REJECT_OFF_TARGET, GateDecision.REJECT_TOO_NARROW},
    StageName.CODE_REVIEW: {GateDecision.APPROVE, GateDecision.REJECT},
}


class GateReview(BaseModel):
    decision: GateDecision
    notes: str = ""

    @property
    def approved(self) -> bool:
        return self.decision == GateDecision.APPROVE


def _json_body(output: StageOutput) -> object:
    try:
        return json.loads(output.body)
    except ValueError as e:
        raise StageOutputInvalid(f"{output.kind.value} output is not JSON: {e}") from e


def require_text(output: StageOutput) -> str:
    """Markdown stages only need a successful, non-blank body."""
    if not output.ok:
        raise StageOutputInvalid(f"{output.kind.value} exited {output.exit_status}")
    text = output.text
    if not text.strip():
        raise StageOutputInvalid(f"{output.kind.value} produced a blank body")
    return text


def parse_gate(output: StageOutput) -> GateReview:
    if not output.ok:
        raise StageOutputInvalid(f"{output.kind.value} exited {output.exit_status}")
    data = _json_body(output)
    try:
        review = GateReview.model_validate(data)
    except ValidationError as e:
        raise StageOutputInvalid(f"invalid {output.kind.value} decision: {e.errors()[0]['msg']}") from e
    if review.decision not in GATE_DECISIONS[output.kind]:
        raise StageOutputInvalid(f"{output.kind.value} cannot emit {review.decision.value}")
    return review


def parse_matrix(
    output: StageOutput,
    task_ids: list[str],
    locked: KeypointMatrix | None = None,
) -> KeypointMatrix:
    """Parse a Task-Evaluate matrix.

    The matrix must cover exactly ``task_ids`` with 4-7 keypoints each and,
    once a baseline is locked, exactly the baseline's key set.
    """
    if not output.ok:
        raise StageOutputInvalid(f"task_evaluate exited {output.exit_status}")
    data = _json_body(output)
    raw = data.get("tasks") if isinstance(data, dict) else None
    if not isinstance(raw, dict):
        raise StageOutputInvalid('task_evaluate output must be {"tasks": {...}}')
    try:
        matrix = KeypointMatrix(
            tasks={
                task_id: {name: Level.parse(level) for name, level in keypoints.items()}
                for task_id, keypoints in raw.items()
            }
        )
    except (AttributeError, ValueError) as e:
        raise StageOutputInvalid(f"invalid matrix: {e}") from e

    if set(matrix.task_ids) != set(task_ids):
        raise StageOutputInvalid(f"matrix tasks {sorted(matrix.task_ids)} != batch tasks {sorted(task_ids)}")
    violations = matrix.bounds_violations()
    if violations:
        raise StageOutputInvalid("keypoint count out of bounds: " + "; ".join(violations))
    if locked is not None:
        try:
            matrix_delta(locked, matrix)
        except KeySetMismatch as e:
            raise StageOutputInvalid(f"locked keypoint set violated: {e.message}") from e
    # Canonical task order keeps artifacts byte-stable.
    return KeypointMatrix(tasks={task_id: dict(sorted(matrix.tasks[task_id].items())) for task_id in task_ids})


def matrix_json(matrix: KeypointMatrix | None) -> str:
    if matrix is None:
        return "{}"
    return json.dumps(matrix.model_dump(mode="json")["tasks"], indent=2, sort_keys=True)
