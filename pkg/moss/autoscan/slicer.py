import hashlib
import json
from datetime import datetime

from pydantic import BaseModel

from moss.core.models import ChunkRecord, TranscriptEntry, TranscriptRole


class SessionRecord(BaseModel):
    """One line of a session JSONL file."""

    ts: datetime
    session_id: str
    conversation_id: str
    turn_index: int
    role: TranscriptRole
    content: str
    task_id: str | None = None

    def entry(self) -> TranscriptEntry:
        return TranscriptEntry(
            turn_index=self.turn_index,
            role=self.role,
            content=self.content,
            ts=self.ts,
            task_id=self.task_id,
        )


class PositionedRecord(BaseModel):
    record: SessionRecord
    # Byte offsets of the line in the session file: [start, end).
    start: int
    end: int


class SessionCursor(BaseModel):
    session_id: str
    byte_offset: int = 0
    last_turn_index: int = -1


class CandidateChunk(BaseModel):
    session_id: str
    conversation_id: str
    records: list[PositionedRecord]

    @property
    def turn_span(self) -> tuple[int, int]:
        return self.records[0].record.turn_index, self.records[-1].record.turn_index

    @property
    def start_offset(self) -> int:
        return self.records[0].start

    @property
    def end_offset(self) -> int:
        return self.records[-1].end

    def to_chunk(self) -> ChunkRecord:
        return ChunkRecord(
            chunk_id=chunk_id_for(self.session_id, self.turn_span),
            session_id=self.session_id,
            conversation_id=self.conversation_id,
            turn_span=self.turn_span,
            transcript=[p.record.entry() for p in self.records],
        )


class SliceResult(BaseModel):
    chunks: list[CandidateChunk] = []
    # Trailing exchange not yet closed by a following user turn; held.
    tail: CandidateChunk | None = None
    # Records before the first user turn, skipped.
    preamble: list[PositionedRecord] = []


def chunk_id_for(session_id: str, turn_span: tuple[int, int]) -> str:
    """Deterministic chunk id, so re-scans of the same span collide."""
    digest = hashlib.sha256(f"{session_id}:{turn_span[0]}-{turn_span[1]}".encode("utf-8")).hexdigest()
    return f"chk_{digest[:24]}"


def transcript_hash(transcript: list[TranscriptEntry]) -> str:
    """Content hash over (role, content) pairs; positions and timestamps excluded."""
    canonical = json.dumps([[e.role.value, e.content] for e in transcript], ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def slice_session(records: list[PositionedRecord], cursor: SessionCursor | None = None) -> SliceResult:
    """Split records into user-turn-delimited exchanges.

    Each chunk runs from a user turn up to, not including, the next user turn.
    The last exchange has no closing user turn yet and is returned as ``tail``
    rather than emitted. Records at or below ``cursor.last_turn_index`` are
    ignored.
    """
    floor = cursor.last_turn_index if cursor else -1
    result = SliceResult()
    current: list[PositionedRecord] = []
    for positioned in records:
        record = positioned.record
        if record.turn_index <= floor:
            continue
        if record.role == TranscriptRole.USER:
            if current:
                result.chunks.append(_candidate(current))
            current = [positioned]
        elif current:
            current.append(positioned)
        else:
            result.preamble.append(positioned)
    if current:
        result.tail = _candidate(current)
    return result


def _candidate(records: list[PositionedRecord]) -> CandidateChunk:
    first = records[0].record
    return CandidateChunk(session_id=first.session_id, conversation_id=first.conversation_id, records=records)
