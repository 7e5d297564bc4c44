"""Deterministic runner that replays a JSON script instead of calling a coding agent.

A script is a JSON list of entries::

    [
      {"stage": "locate", "body": "..."},
      {"stage": "plan_review", "round": 1, "body": {"decision": "reject_too_narrow"}},
      {"stage": "implement", "body": "...", "files": {"src/router.py": "..."}},
      ...
    ]

Entries carrying a ``round`` are served to invocations of that exact round;
entries without one are served in order to any invocation of the stage.
Object bodies are serialized as JSON. ``files`` is applied to the workspace
on collect (``null`` deletes the file), which is how implement-stage edits are
simulated.
"""

import asyncio
import json
from collections import deque
from pathlib import Path

from pydantic import BaseModel, ValidationError

from moss.core.models import StageName
from moss.core.state_store import StateStore
from moss.errors import LaunchFailure, MalformedScript
from moss.logger import get_logger
from moss.runners.base import (
    HandleState,
    InvocationPlan,
    Runner,
    RunnerHandle,
    StageOutput,
)

logger = get_logger("runners.scripted")


class ScriptEntry(BaseModel):
    stage: StageName
    round: int | None = None
    body: str | dict | list
    files: dict[str, str | None] = {}
    exit_status: int = 0
    delay: float = 0.0

    @property
    def body_bytes(self) -> bytes:
        if isinstance(self.body, str):
            return self.body.encode("utf-8")
        return json.dumps(self.body, indent=2, sort_keys=True).encode("utf-8")


def parse_script(raw: str | bytes) -> list[ScriptEntry]:
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as e:
        raise MalformedScript(f"script is not valid JSON: {e}") from e
    if not isinstance(data, list):
        raise MalformedScript("script must be a JSON list of entries")
    try:
        return [ScriptEntry.model_validate(item) for item in data]
    except ValidationError as e:
        raise MalformedScript(f"invalid script entry: {e}") from e


class ScriptedRunner(Runner):
    provider_name = "scripted"

    def __init__(self, store: StateStore, entries: list[ScriptEntry]):
        super().__init__(store)
        self._by_round: dict[tuple[StageName, int], deque[ScriptEntry]] = {}
        self._by_stage: dict[StageName, deque[ScriptEntry]] = {}
        for entry in entries:
            if entry.round is not None:
                self._by_round.setdefault((entry.stage, entry.round), deque()).append(entry)
            else:
                self._by_stage.setdefault(entry.stage, deque()).append(entry)
        self._pending: dict[str, ScriptEntry] = {}
        self._cancel_events: dict[str, asyncio.Event] = {}
        self.invocations: list[tuple[StageName, int | None]] = []

    @classmethod
    def load(cls, script_path: str | Path, store: StateStore) -> "ScriptedRunner":
        path = Path(script_path)
        try:
            raw = path.read_bytes()
        except OSError as e:
            raise MalformedScript(f"cannot read script {path}: {e}") from e
        entries = parse_script(raw)
        logger.info(f"loaded {len(entries)} script entries from {path}")
        return cls(store, entries)

    def remaining(self, stage: StageName) -> int:
        by_round = sum(len(q) for (s, _), q in self._by_round.items() if s == stage)
        return by_round + len(self._by_stage.get(stage, ()))

    def _next_entry(self, stage: StageName, round_: int | None) -> ScriptEntry:
        if round_ is not None and self._by_round.get((stage, round_)):
            return self._by_round[(stage, round_)].popleft()
        if self._by_stage.get(stage):
            return self._by_stage[stage].popleft()
        raise LaunchFailure(f"script exhausted for stage {stage.value} (round {round_})")

    async def launch(self, plan: InvocationPlan) -> RunnerHandle:
        spec = plan.spec
        entry = self._next_entry(spec.stage, spec.round)
        self.invocations.append((spec.stage, spec.round))
        handle = RunnerHandle(
            invocation_id=plan.invocation_id,
            provider_name=self.provider_name,
            plan=plan,
        )
        self._pending[handle.invocation_id] = entry
        self._cancel_events[handle.invocation_id] = asyncio.Event()
        return handle

    async def collect(self, handle: RunnerHandle) -> StageOutput:
        if handle.state == HandleState.CANCELLED:
            raise LaunchFailure(f"invocation {handle.invocation_id} was cancelled")
        entry = self._pending.pop(handle.invocation_id)
        cancelled = self._cancel_events[handle.invocation_id]
        timeout = handle.plan.spec.timeout

        wait = min(entry.delay, timeout)
        try:
            if wait > 0:
                await asyncio.wait_for(cancelled.wait(), wait)
        except (TimeoutError, asyncio.TimeoutError):
            pass
        finally:
            self._cancel_events.pop(handle.invocation_id, None)
        if handle.state == HandleState.CANCELLED:
            raise LaunchFailure(f"invocation {handle.invocation_id} was cancelled")
        if entry.delay > timeout:
            return self._timed_out(handle)

        self._apply_files(Path(handle.plan.spec.workspace_scope), entry.files)
        body = entry.body_bytes
        handle.plan.output_path.write_bytes(body)
        handle.plan.log_path.write_text(f"scripted {entry.stage.value} exit={entry.exit_status}\n")
        handle.mark(HandleState.FINISHED)
        return StageOutput(
            kind=handle.plan.spec.stage,
            body=body,
            exit_status=entry.exit_status,
            log_path=str(handle.plan.log_path),
        )

    async def cancel(self, handle: RunnerHandle) -> None:
        if not handle.mark(HandleState.CANCELLED):
            return
        self._pending.pop(handle.invocation_id, None)
        event = self._cancel_events.get(handle.invocation_id)
        if event is not None:
            event.set()
        logger.info(f"[{handle.invocation_id}] cancelled")

    @staticmethod
    def _apply_files(workspace: Path, files: dict[str, str | None]) -> None:
        for rel, content in sorted(files.items()):
            target = workspace / rel
            if content is None:
                target.unlink(missing_ok=True)
                continue
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(content, encoding="utf-8")
