"""Ephemeral trial workers.

Workers are short-lived containers started from a candidate image, labelled
``moss.role=trial-worker``, attached to their own network and never given the
user-state volume. Each replays a batch task by running ``moss-trial
<task_id> <prompt>`` inside the container and reporting a transcript on
stdout, either ``{"entries": [{"role": ..., "content": ...}, ...]}`` or plain
text taken as a single agent turn.
"""

import asyncio
import enum
import json
from collections.abc import Callable
from typing import Protocol

from pydantic import BaseModel, field_validator

from moss.config import SUBSTRATE_NETWORK, USER_STATE_VOLUME, Timings, get_timings
from moss.core.models import ImageRef, TranscriptEntry, TranscriptRole, new_id, utcnow
from moss.core.state_store import StateStore
from moss.errors import IsolationViolation, RuntimeFailure, WorkerSpawnFailed
from moss.hostd.runtime import TRIAL_LABEL, TRIAL_ROLE, ContainerInfo, ContainerRuntime, ExecResult
from moss.logger import get_logger

logger = get_logger("trials")

TRIAL_COMMAND = "moss-trial"
TRIAL_NETWORK = "moss-trials"


class TrialTask(BaseModel):
    task_id: str
    prompt: str


class TrialPlan(BaseModel):
    image: ImageRef
    tasks: list[TrialTask]
    trials_per_task: int
    workers_n: int

    @field_validator("trials_per_task", "workers_n")
    @classmethod
    def _at_least_one(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be >= 1")
        return value

    def pairs(self) -> list[tuple[TrialTask, int]]:
        return [(task, n) for task in self.tasks for n in range(self.trials_per_task)]


class TrialOutcome(enum.Enum):
    COMPLETED = "completed"
    ERRORED = "errored"
    TIMED_OUT = "timed_out"


class TrialTranscript(BaseModel):
    task_id: str
    trial_index: int
    worker_id: str
    entries: list[TranscriptEntry]
    outcome: TrialOutcome
    path: str | None = None


class IsolationReport(BaseModel):
    worker_id: str
    isolated: bool
    violations: list[str] = []


def transcript_key(prefix: str, task_id: str, trial_index: int) -> str:
    return f"{prefix}/{task_id}/{trial_index}.jsonl"


def parse_trial_output(task: TrialTask, result: ExecResult) -> tuple[list[TranscriptEntry], TrialOutcome]:
    """Turn a worker's exec result into transcript entries.

    The task prompt is always turn 0.
    """
    entries = [TranscriptEntry(turn_index=0, role=TranscriptRole.USER, content=task.prompt, ts=utcnow())]
    turns: list[dict] = []
    output = result.output.strip()
    if output:
        try:
            data = json.loads(output)
            turns = data["entries"] if isinstance(data, dict) else list(data)
        except (ValueError, KeyError, TypeError):
            turns = [{"role": "agent", "content": output}]
    for turn in turns:
        try:
            role = TranscriptRole(turn.get("role", "agent"))
        except (ValueError, AttributeError):
            role = TranscriptRole.AGENT
        content = turn.get("content", "") if isinstance(turn, dict) else str(turn)
        entries.append(TranscriptEntry(turn_index=len(entries), role=role, content=str(content), ts=utcnow()))
    outcome = TrialOutcome.COMPLETED if result.exit_code == 0 else TrialOutcome.ERRORED
    return entries, outcome


def scripted_trial_exec(
    responses: dict[tuple[str, str], str | dict],
    errors: set[tuple[str, str]] | None = None,
) -> Callable[[ContainerInfo, list[str]], ExecResult]:
    """Simulated ``moss-trial`` behavior keyed on ``(image_id or "*", task_id)``."""
    errors = errors or set()

    def behavior(info: ContainerInfo, command: list[str]) -> ExecResult:
        task_id = command[1] if len(command) > 1 else ""
        if (info.image_id, task_id) in errors or ("*", task_id) in errors:
            return ExecResult(exit_code=1, output=f"trial {task_id} crashed")
        response = responses.get((info.image_id, task_id), responses.get(("*", task_id), ""))
        if isinstance(response, dict):
            response = json.dumps(response)
        return ExecResult(exit_code=0, output=response)

    return behavior


class TrialBackend(Protocol):
    """The ``trial.*`` operation family, local or over RPC."""

    async def spawn(self, image_id: str) -> str: ...

    async def exec(self, worker_id: str, task: TrialTask, trial_index: int, key: str) -> TrialTranscript: ...

    async def teardown(self, worker_id: str) -> None: ...


class TrialHost:
    """Host-side trial worker management over a container runtime."""

    def __init__(
        self,
        runtime: ContainerRuntime,
        store: StateStore,
        *,
        timings: Timings | None = None,
        user_state_volume: str = USER_STATE_VOLUME,
        live_network: str = SUBSTRATE_NETWORK,
        worker_mounts: dict[str, str] | None = None,
        worker_network: str = TRIAL_NETWORK,
    ):
        self.runtime = runtime
        self.store = store
        self.timings = timings or get_timings()
        self.user_state_volume = user_state_volume
        self.live_network = live_network
        self.worker_mounts = worker_mounts or {}
        self.worker_network = worker_network

    async def spawn(self, image_id: str) -> str:
        worker_id = new_id("wrk")
        try:
            await asyncio.to_thread(
                self.runtime.start,
                worker_id,
                image_id,
                mounts=self.worker_mounts,
                networks=[self.worker_network],
                labels={TRIAL_LABEL: TRIAL_ROLE},
            )
        except RuntimeFailure as e:
            raise WorkerSpawnFailed(f"cannot start trial worker from {image_id}: {e.message}") from e
        report = await self.isolation_check(worker_id)
        if not report.isolated:
            await self.teardown(worker_id)
            raise IsolationViolation(f"worker {worker_id}: {'; '.join(report.violations)}")
        logger.info(f"trial worker {worker_id} spawned from {image_id}")
        return worker_id

    async def isolation_check(self, worker_id: str) -> IsolationReport:
        info = await asyncio.to_thread(self.runtime.inspect, worker_id)
        if info is None or not info.running:
            return IsolationReport(worker_id=worker_id, isolated=False, violations=["worker is not running"])
        violations = []
        if self.user_state_volume in info.mounts:
            violations.append(f"user-state volume {self.user_state_volume} is mounted")
        if self.live_network in info.networks:
            violations.append(f"attached to live network {self.live_network}")
        return IsolationReport(worker_id=worker_id, isolated=not violations, violations=violations)

    async def exec(self, worker_id: str, task: TrialTask, trial_index: int, key: str) -> TrialTranscript:
        command = [TRIAL_COMMAND, task.task_id, task.prompt]
        streamed = bytearray()
        try:
            result = await asyncio.wait_for(
                asyncio.to_thread(self.runtime.exec, worker_id, command, streamed.extend),
                timeout=self.timings.trial_timeout,
            )
            entries, outcome = parse_trial_output(task, result)
        except (TimeoutError, asyncio.TimeoutError):
            logger.warning(f"trial {task.task_id}#{trial_index} timed out on {worker_id} after {len(streamed)} bytes")
            # Whatever the worker printed before the deadline is kept.
            partial = ExecResult(exit_code=124, output=bytes(streamed).decode("utf-8", errors="replace"))
            entries, _ = parse_trial_output(task, partial)
            outcome = TrialOutcome.TIMED_OUT
        except RuntimeFailure as e:
            logger.warning(f"trial {task.task_id}#{trial_index} errored on {worker_id}: {e.message}")
            entries, outcome = parse_trial_output(task, ExecResult(exit_code=1))

        transcript = TrialTranscript(
            task_id=task.task_id,
            trial_index=trial_index,
            worker_id=worker_id,
            entries=entries,
            outcome=outcome,
            path=key,
        )
        lines = "".join(entry.model_dump_json() + "\n" for entry in entries)
        self.store.write(key, lines.encode("utf-8"))
        return transcript

    async def teardown(self, worker_id: str) -> None:
        try:
            await asyncio.to_thread(self.runtime.stop_and_remove, worker_id)
        except RuntimeFailure as e:
            logger.error(f"teardown of trial worker {worker_id} failed: {e.message}")
            raise

    def sweep(self) -> list[str]:
        """Remove trial workers left behind by an interrupted run."""
        removed = []
        for info in self.runtime.containers(label=f"{TRIAL_LABEL}={TRIAL_ROLE}"):
            try:
                self.runtime.stop_and_remove(info.name)
                removed.append(info.name)
            except RuntimeFailure as e:
                logger.error(f"sweep could not remove {info.name}: {e.message}")
        if removed:
            logger.warning(f"swept {len(removed)} stale trial worker(s)")
        return removed


async def run_trials(plan: TrialPlan, backend: TrialBackend, store: StateStore, prefix: str) -> list[TrialTranscript]:
    """Replay every (task, trial) pair across ``plan.workers_n`` workers.

    Workers pull pairs from a shared queue. All spawned workers are torn down
    before this returns, whatever the outcome. An index of the transcripts is
    written to ``<prefix>/index.json``.
    """
    workers: list[str] = []
    try:
        for _ in range(plan.workers_n):
            workers.append(await backend.spawn(plan.image.image_id))

        queue: asyncio.Queue[tuple[TrialTask, int]] = asyncio.Queue()
        for pair in plan.pairs():
            queue.put_nowait(pair)
        transcripts: list[TrialTranscript] = []

        async def work(worker_id: str) -> None:
            while True:
                try:
                    task, trial_index = queue.get_nowait()
                except asyncio.QueueEmpty:
                    return
                key = transcript_key(prefix, task.task_id, trial_index)
                transcripts.append(await backend.exec(worker_id, task, trial_index, key))

        await asyncio.gather(*(work(w) for w in workers))
    finally:
        for worker_id in workers:
            try:
                await backend.teardown(worker_id)
            except Exception:
                logger.error(f"trial worker {worker_id} not torn down", exc_info=True)

    order = {task.task_id: i for i, task in enumerate(plan.tasks)}
    transcripts.sort(key=lambda t: (order[t.task_id], t.trial_index))
    store.write_json(
        f"{prefix}/index.json",
        [t.model_dump(mode="json", exclude={"entries"}) for t in transcripts],
    )
    counts = {o.value: sum(t.outcome == o for t in transcripts) for o in TrialOutcome}
    logger.info(f"trials for {plan.image.image_id}: {len(transcripts)} transcripts {counts}")
    return transcripts
