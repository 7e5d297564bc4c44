"""Seeded session traffic for end-to-end runs.

Each scenario writes session JSONL files plus an evaluator sidecar whose tags
decide exactly which exchanges count as failure evidence.
"""

import json
import logging
from collections.abc import Callable
from datetime import datetime, timedelta, timezone
from pathlib import Path

from pydantic import BaseModel

from moss.autoscan.engine import dump_record
from moss.autoscan.slicer import SessionRecord, transcript_hash
from moss.core.models import TranscriptRole
from moss.errors import UnknownScenario

logger = logging.getLogger(__name__)

SCENARIO_EPOCH = datetime(2026, 1, 5, 9, 0, tzinfo=timezone.utc)

WEAK_TAGS = {
    "follows_user_constraint": "weak",
    "uses_correct_tool": "missing",
    "reports_outcome": "adequate",
    "keeps_context": "weak",
}
STRONG_TAGS = {
    "follows_user_constraint": "strong",
    "uses_correct_tool": "strong",
    "reports_outcome": "strong",
    "keeps_context": "adequate",
}


class Exchange(BaseModel):
    task_id: str | None
    prompt: str
    replies: list[str]
    weak: bool


class ScenarioResult(BaseModel):
    scenario: str
    sessions: list[str]
    sidecar: str
    deficient_chunks: int
    task_ids: list[str]


FOUR_TASKS = [
    ("reminder-timezone", "Set a reminder for 9am tomorrow in my timezone, Asia/Shanghai."),
    ("file-summary", "Summarize the attached meeting notes in three bullet points."),
    ("calendar-conflict", "Move my 3pm call so it no longer overlaps the design review."),
    ("expense-report", "File the taxi receipt from this morning under project Apollo."),
]

CASE_STUDY_TASKS = [
    ("T141zh", "请帮我把明天上午的会议改到下午三点，并通知所有参会人。"),
    ("T142", "Book a table for four near the office on Friday and share it with the team channel."),
    ("T137zh", "把这份报销单按项目分类汇总，发给财务。"),
    ("T138", "Check whether the nightly backup ran and tell me which files failed."),
]


def _weak_reply(prompt: str) -> list[str]:
    return [
        f"Working on it: {prompt}",
        "I could not reach the right tool, so I noted the request instead.",
    ]


def _strong_reply(prompt: str) -> list[str]:
    return [
        f"Done: {prompt}",
        "Confirmed with the tool result and reported back.",
    ]


def _eight_weak_exchanges() -> dict[str, list[Exchange]]:
    exchanges = [
        Exchange(task_id=task_id, prompt=prompt, replies=_weak_reply(prompt) + [f"(attempt {n})"], weak=True)
        for n in (1, 2)
        for task_id, prompt in FOUR_TASKS
    ]
    return {"sess-weak": exchanges}


def _all_strong() -> dict[str, list[Exchange]]:
    return {
        "sess-strong": [
            Exchange(task_id=task_id, prompt=prompt, replies=_strong_reply(prompt), weak=False)
            for task_id, prompt in FOUR_TASKS
        ]
    }


def _case_study() -> dict[str, list[Exchange]]:
    return {
        "sess-case": [
            Exchange(task_id=task_id, prompt=prompt, replies=_weak_reply(prompt), weak=True)
            for task_id, prompt in CASE_STUDY_TASKS
        ]
    }


SCENARIOS: dict[str, Callable[[], dict[str, list[Exchange]]]] = {
    "eight-weak-exchanges": _eight_weak_exchanges,
    "all-strong": _all_strong,
    "case-study": _case_study,
}


def _records(session_id: str, exchanges: list[Exchange]) -> tuple[list[SessionRecord], list[tuple[list[SessionRecord], bool]]]:
    conversation_id = f"conv-{session_id.removeprefix('sess-')}"
    records: list[SessionRecord] = []
    groups: list[tuple[list[SessionRecord], bool]] = []
    turn = 0

    def add(role: TranscriptRole, content: str, task_id: str | None = None) -> SessionRecord:
        nonlocal turn
        record = SessionRecord(
            ts=SCENARIO_EPOCH + timedelta(seconds=30 * turn),
            session_id=session_id,
            conversation_id=conversation_id,
            turn_index=turn,
            role=role,
            content=content,
            task_id=task_id,
        )
        records.append(record)
        turn += 1
        return record

    for exchange in exchanges:
        group = [add(TranscriptRole.USER, exchange.prompt, exchange.task_id)]
        group += [add(TranscriptRole.AGENT, reply) for reply in exchange.replies]
        groups.append((group, exchange.weak))
    # A closing user turn so the last exchange is complete rather than held as a tail.
    add(TranscriptRole.USER, "Thanks, that's all for now.")
    return records, groups


def generate_sessions(scenario: str, out_dir: str | Path) -> ScenarioResult:
    """Write ``<session_id>.jsonl`` files and ``evaluator_sidecar.json`` into ``out_dir``.

    Raises:
        UnknownScenario: If ``scenario`` is not a known fixture.

    """
    factory = SCENARIOS.get(scenario)
    if factory is None:
        raise UnknownScenario(f"unknown scenario {scenario!r}; expected one of {sorted(SCENARIOS)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    sessions: list[str] = []
    tags: dict[str, dict[str, str]] = {}
    deficient = 0
    task_ids: list[str] = []
    for session_id, exchanges in factory().items():
        records, groups = _records(session_id, exchanges)
        path = out / f"{session_id}.jsonl"
        path.write_text("".join(dump_record(r) + "\n" for r in records), encoding="utf-8")
        sessions.append(str(path))
        for group, weak in groups:
            if weak:
                tags[transcript_hash([r.entry() for r in group])] = WEAK_TAGS
                deficient += 1
        for exchange in exchanges:
            if exchange.task_id and exchange.task_id not in task_ids:
                task_ids.append(exchange.task_id)

    sidecar = out / "evaluator_sidecar.json"
    sidecar.write_text(json.dumps({"tags": tags, "default": STRONG_TAGS}, indent=2, sort_keys=True), encoding="utf-8")
    logger.info(f"Scenario {scenario}: {len(sessions)} session(s), {deficient} deficient exchange(s)")
    return ScenarioResult(
        scenario=scenario,
        sessions=sessions,
        sidecar=str(sidecar),
        deficient_chunks=deficient,
        task_ids=task_ids,
    )
