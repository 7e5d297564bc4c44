"""Incremental session scanning and per-conversation batch curation."""

import asyncio
import json
from collections import defaultdict
from pathlib import Path

import aiofiles
from pydantic import BaseModel, ValidationError

from moss.autoscan.evaluators import ChunkEvaluator
from moss.autoscan.slicer import (
    CandidateChunk,
    PositionedRecord,
    SessionCursor,
    SessionRecord,
    slice_session,
)
from moss.config import SEAL_THRESHOLD, SESSIONS_DIRS
from moss.core.models import ChunkRecord, KeypointTag
from moss.core.state_store import BatchRepository, StateStore
from moss.errors import ConcurrentUpdate, EvaluatorFailure, IoFailure, MalformedRecord, UnknownSession
from moss.logger import get_logger

logger = get_logger("autoscan")


class ScanReport(BaseModel):
    chunks_admitted: int = 0
    batches_sealed: int = 0
    chunks_seen: int = 0
    malformed_records: int = 0
    evaluator_failures: int = 0
    sessions_scanned: int = 0

    def merge(self, other: "ScanReport") -> "ScanReport":
        return ScanReport(**{f: getattr(self, f) + getattr(other, f) for f in ScanReport.model_fields})


class AdmitDecision(BaseModel):
    admitted: bool
    tags: list[KeypointTag] = []
    batch_id: str | None = None
    sealed_batch_id: str | None = None
    duplicate: bool = False


def parse_lines(data: bytes, base_offset: int) -> tuple[list[PositionedRecord], int, int]:
    """Parse complete JSONL lines from ``data`` read at ``base_offset``.

    Returns the parsed records, the offset just past the last complete line,
    and the number of malformed lines skipped. A trailing partial line is
    left unconsumed.
    """
    records: list[PositionedRecord] = []
    malformed = 0
    pos = 0
    last_turn = None
    while True:
        newline = data.find(b"\n", pos)
        if newline < 0:
            break
        line = data[pos:newline]
        start, end = base_offset + pos, base_offset + newline + 1
        pos = newline + 1
        if not line.strip():
            continue
        try:
            record = SessionRecord.model_validate_json(line)
            if last_turn is not None and record.turn_index <= last_turn:
                raise MalformedRecord(f"turn_index {record.turn_index} not increasing")
        except (ValidationError, MalformedRecord) as e:
            malformed += 1
            logger.warning(f"skipping malformed record at byte {start}: {str(e).splitlines()[0]}")
            continue
        last_turn = record.turn_index
        records.append(PositionedRecord(record=record, start=start, end=end))
    return records, base_offset + pos, malformed


class AutoscanEngine:
    """Scans session JSONLs from per-session cursors into per-conversation batches.

    One scan runs at a time per session; batch appends are serialized per
    conversation.
    """

    def __init__(
        self,
        store: StateStore,
        evaluator: ChunkEvaluator,
        sessions_dirs: list[str] | None = None,
        seal_threshold: int = SEAL_THRESHOLD,
    ):
        self.store = store
        self.batches = BatchRepository(store)
        self.evaluator = evaluator
        self.sessions_dirs = [Path(d) for d in (sessions_dirs if sessions_dirs is not None else SESSIONS_DIRS)]
        self.seal_threshold = seal_threshold
        self._session_locks: defaultdict[str, asyncio.Lock] = defaultdict(asyncio.Lock)
        self._conversation_locks: defaultdict[str, asyncio.Lock] = defaultdict(asyncio.Lock)

    # --- cursors ---

    def load_cursor(self, session_id: str) -> SessionCursor:
        cursor = self.store.read_model(f"cursors/{session_id}.cursor", SessionCursor)
        return cursor or SessionCursor(session_id=session_id)

    def save_cursor(self, cursor: SessionCursor) -> None:
        previous = self.load_cursor(cursor.session_id)
        if cursor.byte_offset < previous.byte_offset:
            raise IoFailure(f"cursor for {cursor.session_id} would move backwards")
        self.store.write_model(f"cursors/{cursor.session_id}.cursor", cursor)

    # --- sources ---

    def session_sources(self) -> dict[str, Path]:
        sources: dict[str, Path] = {}
        for directory in self.sessions_dirs:
            if not directory.is_dir():
                continue
            for path in sorted(directory.glob("*.jsonl")):
                sources.setdefault(path.stem, path)
        return sources

    # --- operations ---

    async def catch_up(self, agents: list[str] | None = None) -> ScanReport:
        """Scan every session (optionally only those under ``agents`` directories)."""
        sources = self.session_sources()
        if agents:
            roots = [Path(a).resolve() for a in agents]
            sources = {sid: p for sid, p in sources.items() if p.resolve().parent in roots}
        reports = await asyncio.gather(*(self.scan_session(sid, path) for sid, path in sources.items()))
        report = ScanReport()
        for r in reports:
            report = report.merge(r)
        logger.info(
            f"catch-up scanned {report.sessions_scanned} sessions: "
            f"admitted={report.chunks_admitted} sealed={report.batches_sealed}"
        )
        return report

    async def flag(self, session_id: str) -> ScanReport:
        path = self.session_sources().get(session_id)
        if path is None:
            raise UnknownSession(f"no session JSONL for {session_id}")
        return await self.scan_session(session_id, path)

    async def scan_session(self, session_id: str, path: Path) -> ScanReport:
        async with self._session_locks[session_id]:
            return await self._scan_locked(session_id, path)

    async def _scan_locked(self, session_id: str, path: Path) -> ScanReport:
        report = ScanReport(sessions_scanned=1)
        cursor = self.load_cursor(session_id)
        try:
            size = path.stat().st_size
            if size < cursor.byte_offset:
                logger.warning(f"session {session_id} shrank below its cursor; skipping")
                return report
            async with aiofiles.open(path, "rb") as f:
                await f.seek(cursor.byte_offset)
                data = await f.read()
        except OSError as e:
            raise IoFailure(f"cannot read session {path}: {e}") from e

        records, consumed_to, malformed = parse_lines(data, cursor.byte_offset)
        report.malformed_records = malformed
        sliced = slice_session(records, cursor)

        last_turn = cursor.last_turn_index
        for positioned in sliced.preamble:
            last_turn = max(last_turn, positioned.record.turn_index)
        for candidate in sliced.chunks:
            report.chunks_seen += 1
            decision = await self._admit_candidate(candidate, report)
            if decision is not None and decision.admitted:
                report.chunks_admitted += 1
                report.batches_sealed += int(decision.sealed_batch_id is not None)
            last_turn = candidate.turn_span[1]

        next_offset = sliced.tail.start_offset if sliced.tail else consumed_to
        self.save_cursor(
            SessionCursor(
                session_id=session_id,
                byte_offset=max(cursor.byte_offset, next_offset),
                last_turn_index=last_turn,
            )
        )
        return report

    async def _admit_candidate(self, candidate: CandidateChunk, report: ScanReport) -> AdmitDecision | None:
        try:
            return await self.admit_chunk(candidate.to_chunk())
        except EvaluatorFailure as e:
            report.evaluator_failures += 1
            logger.warning(f"evaluator failed on {candidate.session_id} turns {candidate.turn_span}: {e.message}")
            return None

    async def admit_chunk(self, chunk: ChunkRecord, evaluator: ChunkEvaluator | None = None) -> AdmitDecision:
        """Tag a chunk and append it to its conversation's open batch when deficient.

        Raises:
            EvaluatorFailure: If the evaluator fails; the chunk is not admitted.

        """
        tags = await (evaluator or self.evaluator).evaluate(chunk.transcript)
        chunk = chunk.model_copy(update={"keypoint_tags": tags})
        if not chunk.is_deficient():
            return AdmitDecision(admitted=False, tags=tags)

        async with self._conversation_locks[chunk.conversation_id]:
            with self.batches.lock(chunk.conversation_id):
                if self._already_admitted(chunk):
                    return AdmitDecision(admitted=False, tags=tags, duplicate=True)
                try:
                    return self._append(chunk, tags)
                except ConcurrentUpdate as e:
                    # The open batch was sealed under us (start_run claims open batches).
                    logger.info(f"{e.message}; appending to the conversation's new open batch")
                    return self._append(chunk, tags)

    def _append(self, chunk: ChunkRecord, tags: list[KeypointTag]) -> AdmitDecision:
        batch = self.batches.open_or_create(chunk.conversation_id, self.seal_threshold)
        batch.chunks.append(chunk)
        sealed_id = None
        if batch.chunk_count >= batch.seal_threshold:
            self.batches.seal(batch)
            sealed_id = batch.batch_id
        else:
            self.batches.save(batch)
        return AdmitDecision(admitted=True, tags=tags, batch_id=batch.batch_id, sealed_batch_id=sealed_id)

    def _already_admitted(self, chunk: ChunkRecord) -> bool:
        return any(
            existing.chunk_id == chunk.chunk_id
            for batch in self.batches.all(chunk.conversation_id)
            for existing in batch.chunks
        )


def read_session(path: str | Path) -> list[SessionRecord]:
    """Parse a whole session file; used by tests and the scenario generator."""
    records, _, _ = parse_lines(Path(path).read_bytes(), 0)
    return [p.record for p in records]


def dump_record(record: SessionRecord) -> str:
    return json.dumps(record.model_dump(mode="json", exclude_none=True), ensure_ascii=False)
