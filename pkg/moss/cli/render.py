import io
import json
from typing import Any

from rich.console import Console
from rich.table import Table

from moss.core.levels import Level

RENDER_WIDTH = 100


def render_json(document: Any) -> str:
    """Byte-stable JSON: sorted keys, two-space indent."""
    return json.dumps(document, indent=2, sort_keys=True)


def _to_text(*renderables) -> str:
    buffer = io.StringIO()
    console = Console(file=buffer, width=RENDER_WIDTH, color_system=None, highlight=False, emoji=False)
    for renderable in renderables:
        console.print(renderable)
    return buffer.getvalue().rstrip("\n")


def _fields_table(rows: list[tuple[str, Any]]) -> Table:
    table = Table(show_header=False, box=None, pad_edge=False)
    table.add_column("field", style="bold")
    table.add_column("value")
    for name, value in rows:
        table.add_row(name, "-" if value is None else str(value))
    return table


def render_status(report: dict) -> str:
    candidate = report.get("candidate_image") or {}
    fields = _fields_table(
        [
            ("run", report["run_id"]),
            ("batch", report["batch_id"]),
            ("phase", report["phase"]),
            ("depth", report["depth"]),
            ("iteration", report.get("iteration")),
            ("stage", report.get("current_stage")),
            ("candidate", candidate.get("image_id")),
            ("peak iteration", report.get("peak_iteration")),
            ("stop requested", "yes" if report.get("stop_requested") else "no"),
            ("failure", report.get("failure_reason")),
            ("restarted from", report.get("restarted_from")),
        ]
    )
    renderables: list = [fields]

    summary = report.get("matrix_summary")
    if summary:
        matrix = Table(title="Keypoint matrix", title_justify="left")
        matrix.add_column("task")
        for level in Level:
            matrix.add_column(level.value, justify="right")
        for task_id, counts in summary.items():
            matrix.add_row(task_id, *(str(counts.get(level.value, 0)) for level in Level))
        renderables.append(matrix)

    verdicts = report.get("verdict_history") or []
    if verdicts:
        history = Table(title="Verdicts", title_justify="left")
        history.add_column("#", justify="right")
        history.add_column("verdict")
        history.add_column("rationale")
        for i, verdict in enumerate(verdicts, start=1):
            kind = verdict["kind"] + (" (plateau)" if verdict.get("forced_by_plateau") else "")
            history.add_row(str(i), kind, verdict.get("rationale", ""))
        renderables.append(history)
    return _to_text(*renderables)


def render_batches(batches: list[dict]) -> str:
    if not batches:
        return "no batches"
    table = Table()
    table.add_column("batch")
    table.add_column("conversation")
    table.add_column("state")
    table.add_column("chunks", justify="right")
    table.add_column("tasks")
    for b in batches:
        table.add_row(b["batch_id"], b["conversation_id"], b["state"], str(b["chunk_count"]), ", ".join(b["task_ids"]))
    return _to_text(table)


def render_batch(batch: dict) -> str:
    fields = _fields_table(
        [
            ("batch", batch["batch_id"]),
            ("conversation", batch["conversation_id"]),
            ("state", batch["state"]),
            ("chunks", len(batch["chunks"])),
            ("sealed at", batch.get("sealed_at")),
        ]
    )
    chunks = Table()
    chunks.add_column("chunk")
    chunks.add_column("session")
    chunks.add_column("turns")
    chunks.add_column("deficient keypoints")
    for chunk in batch["chunks"]:
        first, last = chunk["turn_span"]
        deficient = [
            f"{t['keypoint_name']}={t['level']}"
            for t in chunk.get("keypoint_tags", [])
            if Level.parse(t["level"]).is_deficient()
        ]
        chunks.add_row(chunk["chunk_id"], chunk["session_id"], f"{first}-{last}", ", ".join(deficient))
    return _to_text(fields, chunks)


def render_run(run: dict, verb: str) -> str:
    line = f"run {run['run_id']} {verb} on batch {run['batch_id']} (depth {run['depth']})"
    if run.get("restarted_from"):
        line += f", restarting {run['restarted_from']}"
    return line


def render_stop(report: dict) -> str:
    return f"stop requested for run {report['run_id']} (phase {report['phase']})"


def render_apply(request: dict) -> str:
    return (
        f"swap request {request['request_id']} written for batch {request['batch_id']}: "
        f"candidate {request['candidate_image']['image_id']}"
    )


def render_scan(report: dict) -> str:
    return _to_text(_fields_table(list(report.items())))
