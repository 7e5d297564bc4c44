import asyncio
import tempfile
from datetime import datetime, timedelta, timezone

UTC = timezone.utc
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moss.autoscan.engine import AutoscanEngine, dump_record, parse_lines, read_session
from moss.autoscan.evaluators import ScriptedChunkEvaluator, validate_tags
from moss.autoscan.slicer import PositionedRecord, SessionCursor, SessionRecord, slice_session, transcript_hash
from moss.core.models import BatchState, TranscriptRole
from moss.core.state_store import BatchRepository, StateStore
from moss.errors import EvaluatorFailure, UnknownSession
from tests.factories import IMPROVED, TASKS, WEAK, make_chunk

EPOCH = datetime(2026, 1, 5, 9, 0, tzinfo=UTC)


def record(turn: int, role: str, session_id: str = "sess-a", conversation_id: str = "conv-a") -> SessionRecord:
    return SessionRecord(
        ts=EPOCH + timedelta(seconds=30 * turn),
        session_id=session_id,
        conversation_id=conversation_id,
        turn_index=turn,
        role=TranscriptRole(role),
        content=f"{role} says {turn}",
    )


def session_bytes(roles: list[str], **kwargs) -> bytes:
    return "".join(dump_record(record(i, role, **kwargs)) + "\n" for i, role in enumerate(roles)).encode("utf-8")


def positioned(roles: list[str]) -> list[PositionedRecord]:
    records, _, _ = parse_lines(session_bytes(roles), 0)
    return records


def weak_engine(store: StateStore, sessions_dir: Path, seal_threshold: int = 8) -> AutoscanEngine:
    return AutoscanEngine(store, ScriptedChunkEvaluator({}, default=WEAK), [str(sessions_dir)], seal_threshold)


def all_chunk_ids(store: StateStore) -> list[str]:
    return sorted(c.chunk_id for b in BatchRepository(store).all() for c in b.chunks)


class TestSlicer:
    def test_exchanges_run_from_user_turn_to_next_user_turn(self):
        result = slice_session(positioned(["agent", "user", "agent", "tool", "user", "agent"]))

        assert [p.record.turn_index for p in result.preamble] == [0]
        assert [c.turn_span for c in result.chunks] == [(1, 3)]
        assert result.tail.turn_span == (4, 5)

    def test_cursor_floor_skips_scanned_turns(self):
        result = slice_session(
            positioned(["user", "agent", "user", "agent", "user"]),
            SessionCursor(session_id="sess-a", last_turn_index=1),
        )

        assert [c.turn_span for c in result.chunks] == [(2, 3)]
        assert result.tail.turn_span == (4, 4)

    def test_chunk_ids_are_stable(self):
        first = slice_session(positioned(["user", "agent", "user"])).chunks[0].to_chunk()
        again = slice_session(positioned(["user", "agent", "user"])).chunks[0].to_chunk()

        assert first.chunk_id == again.chunk_id

    def test_transcript_hash_ignores_positions(self):
        a = [record(0, "user").entry(), record(1, "agent").entry()]
        b = [e.model_copy(update={"turn_index": e.turn_index + 10, "ts": EPOCH}) for e in a]

        assert transcript_hash(a) == transcript_hash(b)


class TestParseLines:
    def test_partial_trailing_line_is_not_consumed(self):
        data = session_bytes(["user", "agent"])
        cut = len(data) - 5

        records, consumed, malformed = parse_lines(data[:cut], 100)

        assert len(records) == 1
        assert consumed == 100 + data.index(b"\n") + 1
        assert malformed == 0

    def test_malformed_and_regressing_lines_are_skipped(self):
        good = session_bytes(["user", "agent"])
        repeat = dump_record(record(1, "agent")).encode() + b"\n"
        data = good + b"{broken\n" + repeat

        records, consumed, malformed = parse_lines(data, 0)

        assert [p.record.turn_index for p in records] == [0, 1]
        assert malformed == 2
        assert consumed == len(data)


class TestEvaluators:
    def test_tag_count_bounds(self):
        assert len(validate_tags(WEAK)) == 4
        with pytest.raises(EvaluatorFailure, match="4-7"):
            validate_tags({"a": "weak"})
        with pytest.raises(EvaluatorFailure):
            validate_tags({**WEAK, "extra": "brilliant"})

    async def test_sidecar_lookup_by_hash(self):
        transcript = [record(0, "user").entry()]
        evaluator = ScriptedChunkEvaluator({transcript_hash(transcript): WEAK})

        tags = await evaluator.evaluate(transcript)

        assert {t.keypoint_name: t.level.value for t in tags} == WEAK
        with pytest.raises(EvaluatorFailure, match="no scripted tags"):
            await evaluator.evaluate([record(0, "user", session_id="other").entry().model_copy(update={"content": "?"})])


class TestEngine:
    async def test_catch_up_admits_deficient_chunks_only(self, store, tmp_path):
        sessions = tmp_path / "sessions"
        sessions.mkdir()
        (sessions / "sess-a.jsonl").write_bytes(session_bytes(["user", "agent", "user", "agent", "user"]))
        strong_hash = transcript_hash([record(2, "user").entry(), record(3, "agent").entry()])
        evaluator = ScriptedChunkEvaluator({strong_hash: IMPROVED}, default=WEAK)
        engine = AutoscanEngine(store, evaluator, [str(sessions)], seal_threshold=8)

        report = await engine.catch_up()

        assert (report.chunks_seen, report.chunks_admitted, report.batches_sealed) == (2, 1, 0)
        [batch] = BatchRepository(store).all("conv-a")
        assert [c.turn_span for c in batch.chunks] == [(0, 1)]
        assert engine.load_cursor("sess-a").last_turn_index == 3

    async def test_rescan_is_idempotent(self, store, tmp_path):
        (tmp_path / "sess-a.jsonl").write_bytes(session_bytes(["user", "agent", "user"]))
        engine = weak_engine(store, tmp_path)

        await engine.catch_up()
        report = await engine.catch_up()

        assert report.chunks_seen == 0
        assert len(all_chunk_ids(store)) == 1

    async def test_seal_at_threshold(self, store, tmp_path):
        (tmp_path / "sess-a.jsonl").write_bytes(session_bytes(["user", "agent"] * 5 + ["user"]))
        engine = weak_engine(store, tmp_path, seal_threshold=3)

        report = await engine.flag("sess-a")

        assert (report.chunks_admitted, report.batches_sealed) == (5, 1)
        batches = BatchRepository(store).all("conv-a")
        assert [(b.state, b.chunk_count) for b in batches] == [(BatchState.SEALED, 3), (BatchState.OPEN, 2)]

    async def test_evaluator_failure_skips_chunk(self, store, tmp_path):
        (tmp_path / "sess-a.jsonl").write_bytes(session_bytes(["user", "agent", "user"]))
        engine = AutoscanEngine(store, ScriptedChunkEvaluator({}), [str(tmp_path)])

        report = await engine.catch_up()

        assert (report.evaluator_failures, report.chunks_admitted) == (1, 0)
        assert all_chunk_ids(store) == []

    async def test_duplicate_chunk_is_not_admitted_twice(self, store, tmp_path):
        (tmp_path / "sess-a.jsonl").write_bytes(session_bytes(["user", "agent", "user"]))
        engine = weak_engine(store, tmp_path)
        chunk = slice_session(positioned(["user", "agent", "user"])).chunks[0].to_chunk()

        first = await engine.admit_chunk(chunk)
        second = await engine.admit_chunk(chunk)

        assert first.admitted and not second.admitted and second.duplicate

    async def test_flag_unknown_session(self, store, tmp_path):
        with pytest.raises(UnknownSession):
            await weak_engine(store, tmp_path).flag("sess-missing")

    async def test_catch_up_limited_to_agent_dirs(self, store, tmp_path):
        for agent in ("alpha", "beta"):
            (tmp_path / agent).mkdir()
            (tmp_path / agent / f"sess-{agent}.jsonl").write_bytes(
                session_bytes(["user", "agent", "user"], session_id=f"sess-{agent}", conversation_id=f"conv-{agent}")
            )
        engine = AutoscanEngine(
            store, ScriptedChunkEvaluator({}, default=WEAK), [str(tmp_path / "alpha"), str(tmp_path / "beta")]
        )

        report = await engine.catch_up([str(tmp_path / "beta")])

        assert report.sessions_scanned == 1
        assert [b.conversation_id for b in BatchRepository(store).all()] == ["conv-beta"]

    async def test_shrunk_session_is_skipped(self, store, tmp_path):
        path = tmp_path / "sess-a.jsonl"
        path.write_bytes(session_bytes(["user", "agent", "user"]))
        engine = weak_engine(store, tmp_path)
        await engine.catch_up()
        path.write_bytes(b"")

        report = await engine.flag("sess-a")

        assert report.chunks_seen == 0
        assert engine.load_cursor("sess-a").byte_offset > 0

    async def test_admission_racing_a_run_claim_goes_to_a_new_open_batch(self, store, make_harness):
        engine = AutoscanEngine(store, ScriptedChunkEvaluator({}, default=WEAK), [], seal_threshold=8)
        for task_id in TASKS[:3]:
            await engine.admit_chunk(make_chunk(task_id))
        [claimed] = BatchRepository(store).all("conv-weak")
        orchestrator = make_harness([]).orchestrator
        open_or_create = engine.batches.open_or_create

        def claim_after_read(conversation_id, seal_threshold):
            batch = open_or_create(conversation_id, seal_threshold)
            engine.batches.open_or_create = open_or_create
            orchestrator.start_run(None, "light")
            return batch

        engine.batches.open_or_create = claim_after_read
        decision = await engine.admit_chunk(make_chunk(TASKS[3]))

        repo = BatchRepository(store)
        stored = repo.get(claimed.batch_id)
        assert stored.state == BatchState.EVOLVING
        assert stored.task_ids() == TASKS[:3]
        assert decision.admitted and decision.batch_id != claimed.batch_id
        open_batches = [b for b in repo.all("conv-weak") if b.state == BatchState.OPEN]
        assert [b.batch_id for b in open_batches] == [decision.batch_id]
        assert open_batches[0].task_ids() == [TASKS[3]]

    def test_read_session(self, tmp_path):
        path = tmp_path / "s.jsonl"
        path.write_bytes(session_bytes(["user", "agent"]))

        assert [r.role for r in read_session(path)] == [TranscriptRole.USER, TranscriptRole.AGENT]


roles = st.lists(st.sampled_from(["user", "agent", "tool"]), min_size=1, max_size=24)


def check_batches(store: StateStore, threshold: int) -> None:
    batches = BatchRepository(store).all()
    open_batches = [b for b in batches if b.state == BatchState.OPEN]
    assert len({b.conversation_id for b in open_batches}) == len(open_batches)
    assert all(b.chunk_count < threshold for b in open_batches)
    assert all(b.chunk_count == threshold for b in batches if b.state == BatchState.SEALED)


@settings(max_examples=1000, deadline=None)
@given(roles=roles, threshold=st.integers(min_value=1, max_value=4), data=st.data())
def test_incremental_scan_matches_full_scan(roles, threshold, data):
    content = session_bytes(roles)
    splits = sorted(data.draw(st.lists(st.integers(min_value=0, max_value=len(content)), max_size=6)))
    restarts = data.draw(st.lists(st.booleans(), min_size=len(splits) + 1, max_size=len(splits) + 1))

    async def scenario(root: Path) -> None:
        full_dir, inc_dir = root / "full", root / "inc"
        full_dir.mkdir()
        inc_dir.mkdir()
        (full_dir / "sess-a.jsonl").write_bytes(content)
        full_store = StateStore(root / "full-state")
        await weak_engine(full_store, full_dir, threshold).catch_up()

        inc_store = StateStore(root / "inc-state")
        engine = weak_engine(inc_store, inc_dir, threshold)
        offsets = []
        for cut, restart in zip(splits + [len(content)], restarts):
            (inc_dir / "sess-a.jsonl").write_bytes(content[:cut])
            if restart:
                engine = weak_engine(inc_store, inc_dir, threshold)
            await engine.flag("sess-a")
            offsets.append(engine.load_cursor("sess-a").byte_offset)
            check_batches(inc_store, threshold)

        assert offsets == sorted(offsets)
        assert all(o <= len(content) for o in offsets)
        ids = all_chunk_ids(inc_store)
        assert len(ids) == len(set(ids))
        assert ids == all_chunk_ids(full_store)
        check_batches(full_store, threshold)

    with tempfile.TemporaryDirectory() as root:
        asyncio.run(scenario(Path(root)))
