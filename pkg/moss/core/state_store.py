"""File-backed state store shared by the host-daemon, the evolution service and the gateway.

Documents live under a single state root in a fixed layout::

    batches/<conversation_id>/<batch_id>.json
    cursors/<session_id>.cursor
    runs/<run_id>/state.json
    runs/<run_id>/baseline/matrix.json
    runs/<run_id>/iter-<k>/...
    invocations/<invocation_id>/...
    swap/request.json, swap/in_progress.json, swap/last_known_good.json
    images/registry.json

Every write goes through a temp file in the target directory followed by an
atomic rename, so concurrent readers see either the old or the new document.
"""

import fcntl
import json
import os
import tempfile
import threading
from collections import defaultdict
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import TypeVar

from pydantic import BaseModel, ValidationError

from moss.config import STATE_DIR
from moss.core.models import ACTIVE_PHASES, Batch, BatchState, EvolutionRun
from moss.errors import ConcurrentUpdate, IoFailure, UnknownBatch, UnknownRun
from moss.logger import get_logger

logger = get_logger("state")

ModelT = TypeVar("ModelT", bound=BaseModel)

# A StateKey is a "/"-separated path relative to the state root whose first
# segment is one of these.
STATE_PREFIXES = {"batches", "cursors", "runs", "invocations", "swap", "images"}

# Advisory locks are flock-based across processes and reentrant within one.
_held_lock_depth: defaultdict[Path, int] = defaultdict(int)
_thread_locks: defaultdict[Path, threading.RLock] = defaultdict(threading.RLock)


def _check_key(key: str) -> list[str]:
    parts = key.split("/")
    if not parts or parts[0] not in STATE_PREFIXES:
        raise IoFailure(f"state key outside layout: {key!r}")
    if any(part in ("", ".", "..") for part in parts):
        raise IoFailure(f"invalid state key: {key!r}")
    return parts


def atomic_write(path: Path, data: bytes) -> None:
    """Replace ``path`` with ``data`` via temp file, fsync and rename.

    On any failure the temp file is removed and the original left untouched.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f"{path.name}_", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_name, path)
    except OSError as e:
        try:
            os.unlink(tmp_name)
        except FileNotFoundError:
            pass
        raise IoFailure(f"failed to write {path}: {e}") from e


class StateStore:
    """Byte-level access to the state directory plus JSON/model helpers."""

    def __init__(self, root: str | Path = STATE_DIR):
        self.root = Path(root)

    def path(self, key: str) -> Path:
        return self.root.joinpath(*_check_key(key))

    def write(self, key: str, document: bytes) -> None:
        atomic_write(self.path(key), document)

    def read(self, key: str) -> bytes | None:
        try:
            return self.path(key).read_bytes()
        except FileNotFoundError:
            return None
        except OSError as e:
            raise IoFailure(f"failed to read {key}: {e}") from e

    def exists(self, key: str) -> bool:
        return self.path(key).exists()

    def delete(self, key: str) -> None:
        self.path(key).unlink(missing_ok=True)

    def rename(self, src: str, dst: str) -> None:
        """Atomically move one document to another key."""
        target = self.path(dst)
        target.parent.mkdir(parents=True, exist_ok=True)
        try:
            os.replace(self.path(src), target)
        except OSError as e:
            raise IoFailure(f"failed to rename {src} -> {dst}: {e}") from e

    def children(self, key: str, suffix: str = "") -> list[str]:
        """Child names under a directory key, sorted; empty when absent."""
        directory = self.path(key)
        if not directory.is_dir():
            return []
        return sorted(
            p.name for p in directory.iterdir() if p.name.endswith(suffix) and not p.name.endswith(".tmp")
        )

    @contextmanager
    def lock(self, key: str) -> Iterator[None]:
        """Hold an exclusive advisory lock on ``key`` (a lock file in the state directory).

        The lock is shared with every process that mounts the same state root.
        """
        path = self.path(key)
        with _thread_locks[path]:
            if _held_lock_depth[path]:
                _held_lock_depth[path] += 1
                try:
                    yield
                finally:
                    _held_lock_depth[path] -= 1
                return
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "a+b") as f:
                fcntl.flock(f.fileno(), fcntl.LOCK_EX)
                _held_lock_depth[path] = 1
                try:
                    yield
                finally:
                    _held_lock_depth[path] = 0
                    fcntl.flock(f.fileno(), fcntl.LOCK_UN)

    def write_json(self, key: str, data: dict | list) -> None:
        self.write(key, json.dumps(data, indent=2, sort_keys=True).encode("utf-8"))

    def read_json(self, key: str) -> dict | list | None:
        raw = self.read(key)
        return None if raw is None else json.loads(raw)

    def write_model(self, key: str, model: BaseModel) -> None:
        self.write(key, model.model_dump_json(indent=2).encode("utf-8"))

    def read_model(self, key: str, model_cls: type[ModelT]) -> ModelT | None:
        raw = self.read(key)
        if raw is None:
            return None
        try:
            return model_cls.model_validate_json(raw)
        except ValidationError as e:
            raise IoFailure(f"corrupt document at {key}: {e}") from e


class BatchRepository:
    def __init__(self, store: StateStore):
        self.store = store

    @staticmethod
    def key(batch: Batch) -> str:
        return f"batches/{batch.conversation_id}/{batch.batch_id}.json"

    def lock(self, conversation_id: str):
        """Serialize batch writes for one conversation across the host-daemon and the evolution service."""
        return self.store.lock(f"batches/{conversation_id}/.lock")

    def save(self, batch: Batch) -> None:
        """Write ``batch`` if the stored copy is still the revision it was read at.

        Raises:
            ConcurrentUpdate: If another writer saved the batch since it was read.

        """
        with self.lock(batch.conversation_id):
            current = self.store.read_model(self.key(batch), Batch)
            if current is not None and current.revision != batch.revision:
                raise ConcurrentUpdate(
                    f"batch {batch.batch_id} is at revision {current.revision}, not {batch.revision}"
                )
            batch.revision += 1
            try:
                self.store.write_model(self.key(batch), batch)
            except IoFailure:
                batch.revision -= 1
                raise

    def all(self, conversation_id: str | None = None) -> list[Batch]:
        """All batches, oldest first."""
        conversations = [conversation_id] if conversation_id else self.store.children("batches")
        batches: list[Batch] = []
        for conv in conversations:
            for name in self.store.children(f"batches/{conv}", suffix=".json"):
                batch = self.store.read_model(f"batches/{conv}/{name}", Batch)
                if batch is not None:
                    batches.append(batch)
        return sorted(batches, key=lambda b: (b.created_at, b.batch_id))

    def get(self, batch_id: str) -> Batch:
        for conv in self.store.children("batches"):
            batch = self.store.read_model(f"batches/{conv}/{batch_id}.json", Batch)
            if batch is not None:
                return batch
        raise UnknownBatch(f"batch {batch_id} not found")

    def open_batch(self, conversation_id: str) -> Batch | None:
        open_batches = [b for b in self.all(conversation_id) if b.state == BatchState.OPEN]
        if len(open_batches) > 1:
            logger.warning(
                f"conversation {conversation_id} has {len(open_batches)} open batches; using the newest"
            )
        return open_batches[-1] if open_batches else None

    def open_or_create(self, conversation_id: str, seal_threshold: int) -> Batch:
        batch = self.open_batch(conversation_id)
        if batch is None:
            batch = Batch(conversation_id=conversation_id, seal_threshold=seal_threshold)
            self.save(batch)
            logger.info(f"opened batch {batch.batch_id} for conversation {conversation_id}")
        return batch

    def seal(self, batch: Batch) -> Batch:
        """Seal a batch and open its conversation's next batch."""
        batch.transition(BatchState.SEALED)
        self.save(batch)
        logger.info(f"sealed batch {batch.batch_id} at {batch.chunk_count} chunks")
        self.open_or_create(batch.conversation_id, batch.seal_threshold)
        return batch

    def ready_to_apply(self) -> list[Batch]:
        return [b for b in self.all() if b.state == BatchState.READY_TO_APPLY]


class RunRepository:
    def __init__(self, store: StateStore):
        self.store = store

    def save(self, run: EvolutionRun) -> None:
        self.store.write_model(f"runs/{run.run_id}/state.json", run)

    def get(self, run_id: str) -> EvolutionRun:
        run = self.store.read_model(f"runs/{run_id}/state.json", EvolutionRun)
        if run is None:
            raise UnknownRun(f"run {run_id} not found")
        return run

    def all(self) -> list[EvolutionRun]:
        runs = []
        for run_id in self.store.children("runs"):
            run = self.store.read_model(f"runs/{run_id}/state.json", EvolutionRun)
            if run is not None:
                runs.append(run)
        return sorted(runs, key=lambda r: (r.created_at, r.run_id))

    def latest(self) -> EvolutionRun | None:
        runs = self.all()
        return runs[-1] if runs else None

    def active(self) -> EvolutionRun | None:
        for run in self.all():
            if run.phase in ACTIVE_PHASES:
                return run
        return None

    def latest_for_batch(self, batch_id: str) -> EvolutionRun | None:
        runs = [r for r in self.all() if r.batch_id == batch_id]
        return runs[-1] if runs else None
