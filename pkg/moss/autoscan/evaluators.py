import json
from abc import ABC, abstractmethod
from pathlib import Path

from moss.autoscan.slicer import transcript_hash
from moss.config import get_timings
from moss.core.levels import Level
from moss.core.models import KeypointTag, StageName, TranscriptEntry
from moss.errors import EvaluatorFailure, MossError
from moss.logger import get_logger
from moss.runners import RunnerPool, RunnerSpec

logger = get_logger("autoscan.evaluators")

MIN_KEYPOINTS = 4
MAX_KEYPOINTS = 7


def validate_tags(raw: dict) -> list[KeypointTag]:
    """Parse a ``{keypoint: level}`` mapping into tags, enforcing 4-7 entries."""
    if not isinstance(raw, dict):
        raise EvaluatorFailure("keypoints must be an object of name -> level")
    if not MIN_KEYPOINTS <= len(raw) <= MAX_KEYPOINTS:
        raise EvaluatorFailure(f"expected {MIN_KEYPOINTS}-{MAX_KEYPOINTS} keypoints, got {len(raw)}")
    try:
        return [KeypointTag(keypoint_name=name, level=Level.parse(level)) for name, level in raw.items()]
    except ValueError as e:
        raise EvaluatorFailure(str(e)) from e


class ChunkEvaluator(ABC):
    @abstractmethod
    async def evaluate(self, transcript: list[TranscriptEntry]) -> list[KeypointTag]: ...


class ScriptedChunkEvaluator(ChunkEvaluator):
    """Looks tags up in a sidecar mapping keyed by transcript hash.

    Sidecar format::

        {"tags": {"<transcript_hash>": {"keypoint": "weak", ...}},
         "default": {"keypoint": "strong", ...}}

    ``default`` is optional; without it an unknown transcript is an
    evaluator failure.
    """

    def __init__(self, tags: dict[str, dict[str, str]], default: dict[str, str] | None = None):
        self.tags = tags
        self.default = default

    @classmethod
    def load(cls, sidecar_path: str | Path) -> "ScriptedChunkEvaluator":
        try:
            data = json.loads(Path(sidecar_path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as e:
            raise EvaluatorFailure(f"cannot load evaluator sidecar {sidecar_path}: {e}") from e
        return cls(data.get("tags", {}), data.get("default"))

    async def evaluate(self, transcript: list[TranscriptEntry]) -> list[KeypointTag]:
        key = transcript_hash(transcript)
        raw = self.tags.get(key, self.default)
        if raw is None:
            raise EvaluatorFailure(f"no scripted tags for transcript {key[:12]}")
        return validate_tags(raw)


class RunnerChunkEvaluator(ChunkEvaluator):
    """Tags a chunk by invoking the configured runner's task_evaluate stage."""

    def __init__(self, runners: RunnerPool, workspace: str | Path):
        self.runners = runners
        self.workspace = str(workspace)

    def _prompt(self, transcript: list[TranscriptEntry]) -> str:
        lines = [
            "Score this production exchange against 4-7 keypoints on the scale",
            "missing < weak < adequate < strong.",
            'Reply with JSON only: {"keypoints": {"<name>": "<level>", ...}}',
            "",
        ]
        lines += [f"[{e.turn_index}] {e.role.value}: {e.content}" for e in transcript]
        return "\n".join(lines)

    async def evaluate(self, transcript: list[TranscriptEntry]) -> list[KeypointTag]:
        runner = self.runners.for_stage(StageName.TASK_EVALUATE)
        spec = RunnerSpec(
            provider_name=runner.provider_name,
            stage=StageName.TASK_EVALUATE,
            workspace_scope=self.workspace,
            prompt=self._prompt(transcript),
            timeout=get_timings().runner_timeout,
        )
        try:
            output = await runner.invoke(spec)
        except MossError as e:
            raise EvaluatorFailure(f"runner failed: {e.message}") from e
        if not output.ok:
            raise EvaluatorFailure(f"runner exited {output.exit_status}")
        try:
            data = json.loads(output.body)
        except ValueError as e:
            raise EvaluatorFailure(f"evaluator output is not JSON: {e}") from e
        return validate_tags(data.get("keypoints") if isinstance(data, dict) else None)
