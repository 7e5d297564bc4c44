"""Domain model shared by the host-daemon, the evolution service and the CLI.

Every persisted document is a pydantic model carrying a ``schema_version``
field; there is no migration tooling beyond that field.
"""

import enum
import hashlib
from datetime import datetime, timezone

UTC = timezone.utc

import uuid6
from pydantic import BaseModel, Field, field_validator, model_validator

from moss.config import SEAL_THRESHOLD, load_config_file
from moss.core.levels import Level
from moss.errors import InvalidTransition

SCHEMA_VERSION = 1


def new_id(prefix: str) -> str:
    """Time-sortable opaque id, e.g. ``run_0190c6...``."""
    return f"{prefix}_{uuid6.uuid7().hex}"


def utcnow() -> datetime:
    return datetime.now(UTC)


class Document(BaseModel):
    schema_version: int = SCHEMA_VERSION


# --- Evidence ---


class TranscriptRole(enum.Enum):
    USER = "user"
    AGENT = "agent"
    SYSTEM = "system"
    TOOL = "tool"


class TranscriptEntry(BaseModel):
    turn_index: int
    role: TranscriptRole
    content: str
    ts: datetime
    # Optional label carried by benchmark-style sessions; see task derivation.
    task_id: str | None = None


class KeypointTag(BaseModel):
    keypoint_name: str
    level: Level


class ChunkRecord(BaseModel):
    chunk_id: str
    session_id: str
    conversation_id: str
    turn_span: tuple[int, int]
    transcript: list[TranscriptEntry]
    keypoint_tags: list[KeypointTag] = []
    captured_at: datetime = Field(default_factory=utcnow)

    @model_validator(mode="after")
    def _check_shape(self) -> "ChunkRecord":
        first, last = self.turn_span
        if first > last:
            raise ValueError(f"turn_span must satisfy first <= last, got {self.turn_span}")
        if not self.transcript:
            raise ValueError("chunk transcript must be non-empty")
        indices = [e.turn_index for e in self.transcript]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValueError("transcript turn_index must be strictly increasing")
        return self

    def is_deficient(self) -> bool:
        return any(tag.level.is_deficient() for tag in self.keypoint_tags)

    @property
    def task_prompt(self) -> str:
        for entry in self.transcript:
            if entry.role == TranscriptRole.USER:
                return entry.content
        return self.transcript[0].content

    @property
    def task_id(self) -> str:
        for entry in self.transcript:
            if entry.role == TranscriptRole.USER and entry.task_id:
                return entry.task_id
        digest = hashlib.sha256(self.task_prompt.encode("utf-8")).hexdigest()
        return f"task-{digest[:10]}"


class BatchState(enum.Enum):
    OPEN = "open"
    SEALED = "sealed"
    EVOLVING = "evolving"
    READY_TO_APPLY = "ready_to_apply"
    APPLIED = "applied"
    FAILED = "failed"


# Stop returns an evolving batch to sealed; restart re-enters evolving from
# sealed or failed.
BATCH_TRANSITIONS: dict[BatchState, set[BatchState]] = {
    BatchState.OPEN: {BatchState.SEALED},
    BatchState.SEALED: {BatchState.EVOLVING},
    BatchState.EVOLVING: {
        BatchState.READY_TO_APPLY,
        BatchState.FAILED,
        BatchState.SEALED,
    },
    BatchState.READY_TO_APPLY: {BatchState.APPLIED},
    BatchState.FAILED: {BatchState.EVOLVING},
    BatchState.APPLIED: set(),
}


class Batch(Document):
    batch_id: str = Field(default_factory=lambda: new_id("bat"))
    conversation_id: str
    state: BatchState = BatchState.OPEN
    chunks: list[ChunkRecord] = []
    created_at: datetime = Field(default_factory=utcnow)
    sealed_at: datetime | None = None
    seal_threshold: int = SEAL_THRESHOLD
    # Bumped on every save; a save carrying an older revision is refused.
    revision: int = 0

    @field_validator("seal_threshold")
    @classmethod
    def _positive_threshold(cls, value: int) -> int:
        if value < 1:
            raise ValueError("seal_threshold must be positive")
        return value

    @property
    def chunk_count(self) -> int:
        return len(self.chunks)

    def transition(self, to: BatchState) -> None:
        """Move the batch along the state machine, rejecting illegal edges."""
        if to not in BATCH_TRANSITIONS[self.state]:
            raise InvalidTransition(
                f"batch {self.batch_id}: {self.state.value} -> {to.value} is not allowed"
            )
        if to != BatchState.OPEN and not self.chunks:
            raise InvalidTransition(f"batch {self.batch_id} has no chunks")
        if to == BatchState.SEALED and self.sealed_at is None:
            self.sealed_at = utcnow()
        self.state = to

    def task_ids(self) -> list[str]:
        seen: list[str] = []
        for chunk in self.chunks:
            if chunk.task_id not in seen:
                seen.append(chunk.task_id)
        return seen


# --- Evaluation ---


MatrixKey = tuple[str, str]


class KeypointMatrix(BaseModel):
    """Per-task keypoint -> level map."""

    tasks: dict[str, dict[str, Level]] = {}

    @property
    def task_ids(self) -> list[str]:
        return list(self.tasks)

    def keypoint_count(self, task_id: str) -> int:
        return len(self.tasks[task_id])

    def keys(self) -> set[MatrixKey]:
        return {(t, k) for t, kps in self.tasks.items() for k in kps}

    def level(self, key: MatrixKey) -> Level:
        return self.tasks[key[0]][key[1]]

    def score_sum(self) -> int:
        return sum(level.ordinal for kps in self.tasks.values() for level in kps.values())

    def bounds_violations(self, low: int = 4, high: int = 7) -> list[str]:
        return [
            f"{task_id} has {len(kps)} keypoints"
            for task_id, kps in self.tasks.items()
            if not low <= len(kps) <= high
        ]

    def summary(self) -> dict[str, dict[str, int]]:
        """Per-task count of keypoints at each level."""
        out: dict[str, dict[str, int]] = {}
        for task_id, kps in self.tasks.items():
            counts = {level.value: 0 for level in Level}
            for level in kps.values():
                counts[level.value] += 1
            out[task_id] = counts
        return out


class VerdictKind(enum.Enum):
    CONVERGED = "CONVERGED"
    NEED_MORE_WORK = "NEED_MORE_WORK"
    FUNDAMENTAL_LIMIT_MODEL = "FUNDAMENTAL_LIMIT_MODEL"
    FUNDAMENTAL_LIMIT_ARCHITECTURE = "FUNDAMENTAL_LIMIT_ARCHITECTURE"


class Verdict(BaseModel):
    kind: VerdictKind
    rationale: str = ""
    forced_by_plateau: bool = False

    @model_validator(mode="after")
    def _forced_only_converged(self) -> "Verdict":
        if self.forced_by_plateau and self.kind != VerdictKind.CONVERGED:
            raise ValueError("forced_by_plateau requires kind=CONVERGED")
        return self


# --- Depth ---


class DepthName(enum.Enum):
    LIGHT = "light"
    STANDARD = "standard"
    DEEP = "deep"


class DepthProfile(BaseModel):
    name: DepthName
    max_iterations: int
    plan_rounds: int
    code_rounds: int
    trials_per_task: int
    plateau_window: int
    trial_workers_n: int

    @model_validator(mode="after")
    def _check_dials(self) -> "DepthProfile":
        for field in (
            "max_iterations",
            "plan_rounds",
            "code_rounds",
            "trials_per_task",
            "plateau_window",
            "trial_workers_n",
        ):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be >= 1")
        if self.plateau_window > self.max_iterations:
            raise ValueError("plateau_window must not exceed max_iterations")
        return self


DEFAULT_DEPTH_PROFILES: dict[DepthName, dict[str, int]] = {
    DepthName.LIGHT: {
        "max_iterations": 2,
        "plan_rounds": 2,
        "code_rounds": 2,
        "trials_per_task": 1,
        "plateau_window": 2,
        "trial_workers_n": 1,
    },
    DepthName.STANDARD: {
        "max_iterations": 4,
        "plan_rounds": 3,
        "code_rounds": 3,
        "trials_per_task": 2,
        "plateau_window": 3,
        "trial_workers_n": 2,
    },
    DepthName.DEEP: {
        "max_iterations": 8,
        "plan_rounds": 5,
        "code_rounds": 5,
        "trials_per_task": 3,
        "plateau_window": 4,
        "trial_workers_n": 3,
    },
}


def get_depth_profile(name: str | DepthName = DepthName.STANDARD) -> DepthProfile:
    """Get a depth profile, applying ``depth_profiles`` overrides from the YAML file."""
    depth = name if isinstance(name, DepthName) else DepthName(name)
    dials = dict(DEFAULT_DEPTH_PROFILES[depth])
    overrides = load_config_file().get("depth_profiles", {}).get(depth.value, {})
    dials.update(overrides)
    return DepthProfile(name=depth, **dials)


# --- Runs ---


class StageName(enum.Enum):
    LOCATE = "locate"
    PLAN = "plan"
    PLAN_REVIEW = "plan_review"
    IMPLEMENT = "implement"
    CODE_REVIEW = "code_review"
    TASK_EVALUATE = "task_evaluate"
    VERDICT = "verdict"


class ImageRef(BaseModel):
    image_id: str
    built_from_rev: str
    built_at: datetime = Field(default_factory=utcnow)

    @field_validator("image_id")
    @classmethod
    def _non_empty(cls, value: str) -> str:
        if not value:
            raise ValueError("image_id must be non-empty")
        return value


class RunPhase(enum.Enum):
    BASELINE = "baseline"
    ITERATING = "iterating"
    CONVERGED = "converged"
    FAILED = "failed"
    FAILED_MODEL_LIMIT = "failed_model_limit"
    FAILED_ARCHITECTURE_LIMIT = "failed_architecture_limit"
    STOPPED = "stopped"


ACTIVE_PHASES = {RunPhase.BASELINE, RunPhase.ITERATING}


class IterationRecord(BaseModel):
    index: int
    stage_artifacts: dict[str, str] = {}
    start_rev: str | None = None
    commit_rev: str | None = None
    image: ImageRef | None = None
    matrix: KeypointMatrix | None = None
    verdict: Verdict | None = None

    @model_validator(mode="after")
    def _check_links(self) -> "IterationRecord":
        if self.verdict is not None and self.matrix is None:
            raise ValueError("verdict present implies matrix present")
        if self.image is not None and self.commit_rev is None:
            raise ValueError("image present implies commit_rev present")
        return self


class EvolutionRun(Document):
    run_id: str = Field(default_factory=lambda: new_id("run"))
    batch_id: str
    depth: DepthProfile
    phase: RunPhase = RunPhase.BASELINE
    baseline_matrix: KeypointMatrix | None = None
    iterations: list[IterationRecord] = []
    candidate_image: ImageRef | None = None
    peak_iteration: int | None = None
    current_stage: str | None = None
    stop_requested: bool = False
    failure_reason: str | None = None
    restarted_from: str | None = None
    created_at: datetime = Field(default_factory=utcnow)
    updated_at: datetime = Field(default_factory=utcnow)

    @model_validator(mode="after")
    def _check_run(self) -> "EvolutionRun":
        if self.phase == RunPhase.CONVERGED and self.candidate_image is None:
            raise ValueError("converged run must record a candidate image")
        if len(self.iterations) > self.depth.max_iterations:
            raise ValueError("iterations exceed depth.max_iterations")
        if self.peak_iteration is not None and not any(
            it.index == self.peak_iteration for it in self.iterations
        ):
            raise ValueError("peak_iteration must index an existing iteration")
        return self

    @property
    def is_active(self) -> bool:
        return self.phase in ACTIVE_PHASES

    def iteration(self, index: int) -> IterationRecord:
        for it in self.iterations:
            if it.index == index:
                return it
        raise KeyError(index)

    def verdict_history(self) -> list[Verdict]:
        return [it.verdict for it in self.iterations if it.verdict is not None]
