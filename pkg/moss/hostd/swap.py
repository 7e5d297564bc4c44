"""Swap supervisor: promotes a candidate image to the live substrate.

The evolution service (via the gateway) asks for a swap by atomically writing
``swap/request.json``. The supervisor polls for it, moves it into the journal
``swap/in_progress.json`` and walks these checkpoints::

    detected -> old_stopped -> candidate_started -> probing -> decided -> archived

A committed swap records the candidate as last-known-good. A rolled-back swap
restarts the substrate from the last-known-good image, never from anything the
request names. If that restart fails too the supervisor writes
``swap/fatal.json`` and refuses further swaps until an operator clears it.

Restarting after a crash replays the journal: before ``decided`` the swap is
rolled back, at ``decided`` the recorded outcome is finished, and archived
records whose webhook never went out are redelivered.
"""

import asyncio
import enum
from collections.abc import AsyncIterator, Awaitable, Callable
from contextlib import asynccontextmanager
from datetime import datetime
from pathlib import Path

from pydantic import BaseModel, Field

from moss.config import (
    STATE_MOUNT,
    SUBSTRATE_CONTAINER,
    SUBSTRATE_IMAGE,
    SUBSTRATE_NETWORK,
    USER_STATE_DIR,
    USER_STATE_MOUNT,
    USER_STATE_VOLUME,
    Timings,
    get_timings,
    substrate_env,
)
from moss.core.models import BatchState, ImageRef, new_id, utcnow
from moss.core.state_store import BatchRepository, StateStore
from moss.errors import InvalidTransition, IoFailure, MossError, RuntimeFailure, UnknownBatch
from moss.hostd.images import ImageRegistry
from moss.hostd.probes import (
    REQUIRED_CONSECUTIVE_PASSES,
    ProbeOutcome,
    ProbeReport,
    get_cli_probes,
    health_probe,
    run_probe_window,
)
from moss.hostd.runtime import ContainerRuntime
from moss.logger import get_logger
from moss.webhooks import WebhookDispatcher, WebhookEvent

logger = get_logger("hostd.swap")

REQUEST_KEY = "swap/request.json"
JOURNAL_KEY = "swap/in_progress.json"
FATAL_KEY = "swap/fatal.json"
HISTORY_PREFIX = "swap/history"
LKG_TAG = "lkg"

SwapOutcome = ProbeOutcome

APPLY_STATUS = {
    SwapOutcome.COMMITTED: "success",
    SwapOutcome.ROLLED_BACK: "rolled-back",
}


class SwapRequest(BaseModel):
    request_id: str = Field(default_factory=lambda: new_id("swp"))
    candidate_image: ImageRef
    batch_id: str
    run_id: str
    requested_at: datetime = Field(default_factory=utcnow)


class SwapCheckpoint(enum.Enum):
    DETECTED = "detected"
    OLD_STOPPED = "old_stopped"
    CANDIDATE_STARTED = "candidate_started"
    PROBING = "probing"
    DECIDED = "decided"
    ARCHIVED = "archived"


class SwapJournal(BaseModel):
    request: SwapRequest
    checkpoint: SwapCheckpoint = SwapCheckpoint.DETECTED
    previous_image: str | None = None
    outcome: SwapOutcome | None = None
    reason: str | None = None
    samples: list[ProbeReport] = []
    commit_index: int | None = None


class SwapRecord(BaseModel):
    request: SwapRequest
    outcome: SwapOutcome
    live_image: str | None
    reason: str | None = None
    samples: list[ProbeReport] = []
    commit_index: int | None = None
    fatal: bool = False
    decided_at: datetime = Field(default_factory=utcnow)
    webhook_delivered: bool = False


class FatalAlert(BaseModel):
    request_id: str
    reason: str
    raised_at: datetime = Field(default_factory=utcnow)


def write_swap_request(store: StateStore, request: SwapRequest) -> SwapRequest:
    """Atomically publish a swap request for the supervisor to pick up."""
    store.write_model(REQUEST_KEY, request)
    logger.info(f"swap request {request.request_id} written for {request.candidate_image.image_id}")
    return request


class SwapSupervisor:
    def __init__(
        self,
        store: StateStore,
        runtime: ContainerRuntime,
        images: ImageRegistry,
        webhooks: WebhookDispatcher,
        *,
        timings: Timings | None = None,
        heartbeat_path: Path | None = None,
        cli_probes: list[list[str]] | None = None,
        container_name: str = SUBSTRATE_CONTAINER,
        user_state_volume: str = USER_STATE_VOLUME,
        network: str = SUBSTRATE_NETWORK,
        env: dict[str, str] | None = None,
        sleep: Callable[[float], Awaitable[None]] = asyncio.sleep,
        clock: Callable[[], datetime] = utcnow,
        checkpoint_hook: Callable[[SwapCheckpoint], None] | None = None,
    ):
        self.store = store
        self.runtime = runtime
        self.images = images
        self.webhooks = webhooks
        self.timings = timings or get_timings()
        self.heartbeat_path = heartbeat_path or Path(USER_STATE_DIR) / "heartbeat.json"
        self.cli_probes = cli_probes or get_cli_probes()
        self.container_name = container_name
        self.user_state_volume = user_state_volume
        self.network = network
        self.env = substrate_env() if env is None else env
        self.sleep = sleep
        self.clock = clock
        self.checkpoint_hook = checkpoint_hook
        # Held for the whole swap; image.* mutations take it too.
        self.lock = asyncio.Lock()
        # Runner and trial operations in flight; a swap starts only once this drains.
        self._operations = 0
        self._drained = asyncio.Condition()

    # --- state ---

    def fatal(self) -> FatalAlert | None:
        return self.store.read_model(FATAL_KEY, FatalAlert)

    def clear_fatal(self) -> None:
        self.store.delete(FATAL_KEY)
        logger.info("fatal swap alert cleared")

    def history(self) -> list[SwapRecord]:
        records = [
            self.store.read_model(f"{HISTORY_PREFIX}/{name}", SwapRecord)
            for name in self.store.children(HISTORY_PREFIX, suffix=".json")
        ]
        return sorted((r for r in records if r is not None), key=lambda r: r.decided_at)

    @asynccontextmanager
    async def operation(self, *, gated: bool = True) -> AsyncIterator[None]:
        """Track a runner or trial operation for the duration of the block.

        A gated operation first waits out any swap in flight. Operations that only
        shorten others (cancel, teardown) pass ``gated=False`` so a swap waiting
        to drain cannot block them.
        """
        if gated:
            async with self.lock:
                self._operations += 1
        else:
            self._operations += 1
        try:
            yield
        finally:
            async with self._drained:
                self._operations -= 1
                self._drained.notify_all()

    @property
    def operations_in_flight(self) -> int:
        return self._operations

    async def _drain(self) -> None:
        if self._operations:
            logger.info(f"swap waiting on {self._operations} in-flight runner/trial operation(s)")
        async with self._drained:
            await self._drained.wait_for(lambda: self._operations == 0)

    def _checkpoint(self, journal: SwapJournal, checkpoint: SwapCheckpoint) -> None:
        journal.checkpoint = checkpoint
        if checkpoint != SwapCheckpoint.ARCHIVED:
            self.store.write_model(JOURNAL_KEY, journal)
        logger.info(f"swap {journal.request.request_id}: {checkpoint.value}")
        if self.checkpoint_hook is not None:
            self.checkpoint_hook(checkpoint)

    # --- startup ---

    def ensure_initial(self) -> None:
        """Register the initial substrate image as last-known-good and keep it live."""
        lkg = self.images.last_known_good()
        if lkg is None:
            image = self.images.get(SUBSTRATE_IMAGE) or ImageRef(image_id=SUBSTRATE_IMAGE, built_from_rev="initial")
            self.images.record(image)
            self.images.tag(image.image_id, LKG_TAG)
            lkg = self.images.set_last_known_good(image)
            logger.info(f"initial deployment registered {image.image_id} as last-known-good")
        if self.store.exists(JOURNAL_KEY):
            return
        info = self.runtime.inspect(self.container_name)
        if info is None or not info.running:
            self.runtime.stop_and_remove(self.container_name)
            self._start(lkg.image.image_id)

    def _start(self, image_id: str) -> None:
        self.runtime.start(
            self.container_name,
            image_id,
            mounts={self.user_state_volume: USER_STATE_MOUNT, str(self.store.root): STATE_MOUNT},
            env=self.env,
            networks=[self.network],
            labels={"moss.role": "substrate"},
        )

    # --- polling ---

    async def run_forever(self) -> None:
        await self.recover()
        while True:
            try:
                await self.tick()
            except Exception:
                logger.error("swap supervisor tick failed", exc_info=True)
            await self.sleep(self.timings.swap_poll)

    async def tick(self) -> SwapOutcome | None:
        alert = self.fatal()
        if alert is not None:
            logger.warning(f"swap supervisor halted by fatal alert for {alert.request_id}: {alert.reason}")
            return None
        if self.store.exists(JOURNAL_KEY):
            return await self.recover()
        if not self.store.exists(REQUEST_KEY):
            return None
        try:
            request = self.store.read_model(REQUEST_KEY, SwapRequest)
        except IoFailure as e:
            logger.error(f"discarding unreadable swap request: {e.message}")
            self.store.delete(REQUEST_KEY)
            return None
        if request is None:
            return None
        if self.store.exists(f"{HISTORY_PREFIX}/{request.request_id}.json"):
            logger.warning(f"swap request {request.request_id} already handled; dropping replay")
            self.store.delete(REQUEST_KEY)
            return None

        async with self.lock:
            await self._drain()
            journal = SwapJournal(request=request)
            self._checkpoint(journal, SwapCheckpoint.DETECTED)
            self.store.delete(REQUEST_KEY)
            return await self._execute(journal)

    async def _execute(self, journal: SwapJournal) -> SwapOutcome:
        request = journal.request
        candidate = request.candidate_image.image_id
        info = await asyncio.to_thread(self.runtime.inspect, self.container_name)
        journal.previous_image = info.image_id if info else None

        if self.images.get(candidate) is None:
            journal.outcome = SwapOutcome.ROLLED_BACK
            journal.reason = f"candidate {candidate} is not in the image registry"
            logger.warning(f"swap {request.request_id}: {journal.reason}")
            self._checkpoint(journal, SwapCheckpoint.DECIDED)
            return await self._finish(journal)

        try:
            await asyncio.to_thread(self.runtime.stop_and_remove, self.container_name)
            self._checkpoint(journal, SwapCheckpoint.OLD_STOPPED)
            await asyncio.to_thread(self._start, candidate)
            self._checkpoint(journal, SwapCheckpoint.CANDIDATE_STARTED)
        except RuntimeFailure as e:
            journal.outcome = SwapOutcome.ROLLED_BACK
            journal.reason = e.message
            logger.error(f"swap {request.request_id}: container operation failed: {e.message}")
            self._checkpoint(journal, SwapCheckpoint.DECIDED)
            return await self._finish(journal)

        self._checkpoint(journal, SwapCheckpoint.PROBING)

        async def probe(index: int) -> ProbeReport:
            return await health_probe(
                self.runtime,
                self.container_name,
                heartbeat_path=self.heartbeat_path,
                freshness=self.timings.heartbeat_freshness,
                cli_probes=self.cli_probes,
                sample_index=index,
                clock=self.clock,
            )

        window = await run_probe_window(probe, self.timings, sleep=self.sleep)
        journal.outcome = window.outcome
        journal.samples = window.samples
        journal.commit_index = window.commit_index
        if window.outcome == SwapOutcome.ROLLED_BACK:
            journal.reason = f"no {REQUIRED_CONSECUTIVE_PASSES} consecutive passes in {len(window.samples)} samples"
        self._checkpoint(journal, SwapCheckpoint.DECIDED)
        return await self._finish(journal)

    async def _finish(self, journal: SwapJournal) -> SwapOutcome:
        """Apply a decided outcome. Every step is safe to repeat after a crash."""
        request = journal.request
        fatal = False
        if journal.outcome == SwapOutcome.COMMITTED:
            candidate = request.candidate_image
            if self.images.get(candidate.image_id) is None:
                self.images.record(candidate)
            self.images.tag(candidate.image_id, LKG_TAG)
            self.images.set_last_known_good(candidate)
            self._mark_applied(request.batch_id)
            live = candidate.image_id
        else:
            live, fatal = await self._rollback(journal)

        record = self.store.read_model(f"{HISTORY_PREFIX}/{request.request_id}.json", SwapRecord)
        if record is None:
            record = SwapRecord(
                request=request,
                outcome=journal.outcome,
                live_image=live,
                reason=journal.reason,
                samples=journal.samples,
                commit_index=journal.commit_index,
                fatal=fatal,
            )
            self.store.write_model(f"{HISTORY_PREFIX}/{request.request_id}.json", record)
        self.store.delete(JOURNAL_KEY)
        self._checkpoint(journal, SwapCheckpoint.ARCHIVED)
        logger.info(f"swap {request.request_id} {record.outcome.value}; live image {live}")
        await self._deliver(record)
        return record.outcome

    async def _rollback(self, journal: SwapJournal) -> tuple[str | None, bool]:
        lkg = self.images.last_known_good()
        if lkg is None:
            self._raise_fatal(journal, "no last-known-good image to roll back to")
            return None, True
        target = lkg.image.image_id
        try:
            await asyncio.to_thread(self.runtime.stop_and_remove, self.container_name)
            await asyncio.to_thread(self._start, target)
        except RuntimeFailure as e:
            self._raise_fatal(journal, f"rollback start of {target} failed: {e.message}")
            return None, True
        logger.warning(f"swap {journal.request.request_id} rolled back to {target}")
        return target, False

    def _raise_fatal(self, journal: SwapJournal, reason: str) -> None:
        logger.error(f"swap {journal.request.request_id}: {reason}; refusing further swaps")
        journal.reason = reason
        self.store.write_model(FATAL_KEY, FatalAlert(request_id=journal.request.request_id, reason=reason))

    def _mark_applied(self, batch_id: str) -> None:
        batches = BatchRepository(self.store)
        try:
            batch = batches.get(batch_id)
            if batch.state != BatchState.APPLIED:
                batch.transition(BatchState.APPLIED)
                batches.save(batch)
        except (UnknownBatch, InvalidTransition) as e:
            logger.warning(f"cannot mark batch {batch_id} applied: {e.message}")

    async def _deliver(self, record: SwapRecord) -> None:
        request = record.request
        detail = {
            "request_id": request.request_id,
            "candidate_image": request.candidate_image.image_id,
            "live_image": record.live_image,
        }
        if record.reason:
            detail["reason"] = record.reason
        if record.fatal:
            detail["fatal"] = True
        result = await self.webhooks.fire(
            WebhookEvent.APPLY_COMPLETE,
            status=APPLY_STATUS[record.outcome],
            run_id=request.run_id,
            batch_id=request.batch_id,
            detail=detail,
            delivery_id=request.request_id,
        )
        if result.delivered:
            record.webhook_delivered = True
            self.store.write_model(f"{HISTORY_PREFIX}/{request.request_id}.json", record)

    # --- crash recovery ---

    async def recover(self) -> SwapOutcome | None:
        """Replay an interrupted swap and redeliver undelivered apply-complete webhooks."""
        outcome = None
        if self.fatal() is None:
            try:
                journal = self.store.read_model(JOURNAL_KEY, SwapJournal)
            except MossError as e:
                logger.error(f"swap journal unreadable, rolling back to last-known-good: {e.message}")
                journal = None
                self.store.delete(JOURNAL_KEY)
                await self._restore_lkg()
            if journal is not None:
                async with self.lock:
                    if journal.checkpoint != SwapCheckpoint.DECIDED or journal.outcome is None:
                        logger.warning(
                            f"swap {journal.request.request_id} interrupted at {journal.checkpoint.value}; rolling back"
                        )
                        journal.outcome = SwapOutcome.ROLLED_BACK
                        journal.reason = f"interrupted at {journal.checkpoint.value}"
                    outcome = await self._finish(journal)

        for record in self.history():
            if not record.webhook_delivered:
                logger.info(f"redelivering apply-complete for {record.request.request_id}")
                await self._deliver(record)
        return outcome

    async def _restore_lkg(self) -> None:
        lkg = self.images.last_known_good()
        if lkg is None:
            return
        info = await asyncio.to_thread(self.runtime.inspect, self.container_name)
        if info is not None and info.running:
            lkg_id = await asyncio.to_thread(self.runtime.resolve_image, lkg.image.image_id)
            if info.image_id == lkg_id:
                return
        await asyncio.to_thread(self.runtime.stop_and_remove, self.container_name)
        await asyncio.to_thread(self._start, lkg.image.image_id)
