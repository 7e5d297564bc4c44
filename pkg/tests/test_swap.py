import json
from datetime import timedelta

import pytest

from moss.config import SUBSTRATE_IMAGE
from moss.core.models import BatchState, ImageRef, utcnow
from moss.core.state_store import BatchRepository
from moss.hostd.images import ImageRegistry
from moss.hostd.swap import (
    FATAL_KEY,
    JOURNAL_KEY,
    LKG_TAG,
    REQUEST_KEY,
    SwapCheckpoint,
    SwapOutcome,
    SwapRequest,
    SwapSupervisor,
    write_swap_request,
)
from tests.factories import make_batch

CONTAINER = "moss-gateway"
CANDIDATE = ImageRef(image_id="sim-candidate0001", built_from_rev="c0ffee")
PROBES = [["moss-sandbox-status", "gateway"], ["moss-sandbox-status", "hooks"]]


class Crash(Exception):
    pass


async def no_sleep(seconds: float) -> None:
    return None


@pytest.fixture
def heartbeat(tmp_path):
    path = tmp_path / "user-state" / "heartbeat.json"
    path.parent.mkdir()

    def beat(age: float = 0.0) -> None:
        path.write_text(json.dumps({"ts": (utcnow() - timedelta(seconds=age)).isoformat()}))

    beat()
    return path, beat


@pytest.fixture
def images(store):
    registry = ImageRegistry(store)
    registry.record(CANDIDATE)
    return registry


@pytest.fixture
def ready_batch(store):
    batch = make_batch(state=BatchState.READY_TO_APPLY)
    BatchRepository(store).save(batch)
    return batch


@pytest.fixture
def make_supervisor(store, runtime, images, webhooks, fast_timings, heartbeat, tmp_path):
    def build(checkpoint_hook=None) -> SwapSupervisor:
        return SwapSupervisor(
            store,
            runtime,
            images,
            webhooks.dispatcher(),
            timings=fast_timings,
            heartbeat_path=heartbeat[0],
            cli_probes=PROBES,
            container_name=CONTAINER,
            user_state_volume=str(tmp_path / "user-state"),
            network="moss-live",
            sleep=no_sleep,
            checkpoint_hook=checkpoint_hook,
        )

    return build


@pytest.fixture
def supervisor(make_supervisor):
    sup = make_supervisor()
    sup.ensure_initial()
    return sup


def request_swap(store, batch, image: ImageRef = CANDIDATE) -> SwapRequest:
    return write_swap_request(store, SwapRequest(candidate_image=image, batch_id=batch.batch_id, run_id="run_test"))


def live_image(runtime) -> str:
    info = runtime.inspect(CONTAINER)
    assert info is not None and info.running
    return info.image_id


def test_ensure_initial_registers_and_starts(supervisor, runtime, images, store, tmp_path):
    lkg = images.last_known_good()

    assert lkg.image.image_id == SUBSTRATE_IMAGE
    assert LKG_TAG in images.entries()[SUBSTRATE_IMAGE].tags
    info = runtime.inspect(CONTAINER)
    assert info.image_id == SUBSTRATE_IMAGE
    assert info.mounts == [str(tmp_path / "user-state"), str(store.root)]
    assert info.env["MOSS_USER_STATE_DIR"] == "/user-state"
    assert info.env["MOSS_STATE_DIR"] == "/state"
    assert info.networks == ["moss-live"]


def test_ensure_initial_is_idempotent(supervisor, runtime):
    supervisor.ensure_initial()

    assert [e for e in runtime.events if e[0] == "start"] == [("start", CONTAINER, SUBSTRATE_IMAGE)]


async def test_tick_without_request_is_noop(supervisor, webhooks):
    assert await supervisor.tick() is None
    assert webhooks.payloads == []


async def test_healthy_candidate_commits(supervisor, store, runtime, images, ready_batch, webhooks):
    request = request_swap(store, ready_batch)

    outcome = await supervisor.tick()

    assert outcome == SwapOutcome.COMMITTED
    assert live_image(runtime) == CANDIDATE.image_id
    assert images.last_known_good().image.image_id == CANDIDATE.image_id
    assert LKG_TAG in images.entries()[CANDIDATE.image_id].tags
    assert BatchRepository(store).get(ready_batch.batch_id).state == BatchState.APPLIED
    assert not store.exists(REQUEST_KEY)
    assert not store.exists(JOURNAL_KEY)

    (record,) = supervisor.history()
    assert record.commit_index == 2
    assert len(record.samples) == 3
    assert record.webhook_delivered

    (payload,) = webhooks.payloads
    assert payload["event"] == "apply-complete"
    assert payload["status"] == "success"
    assert payload["delivery_id"] == request.request_id
    assert payload["detail"]["live_image"] == CANDIDATE.image_id


async def test_frozen_heartbeat_rolls_back(supervisor, store, runtime, images, ready_batch, webhooks, heartbeat):
    heartbeat[1](age=120)
    request_swap(store, ready_batch)

    outcome = await supervisor.tick()

    assert outcome == SwapOutcome.ROLLED_BACK
    assert live_image(runtime) == SUBSTRATE_IMAGE
    assert images.last_known_good().image.image_id == SUBSTRATE_IMAGE
    assert BatchRepository(store).get(ready_batch.batch_id).state == BatchState.READY_TO_APPLY

    (record,) = supervisor.history()
    assert len(record.samples) == 18
    assert record.commit_index is None
    assert all(not s.checks["heartbeat_fresh"] for s in record.samples)

    (payload,) = webhooks.payloads
    assert payload["status"] == "rolled-back"
    assert payload["detail"]["live_image"] == SUBSTRATE_IMAGE


async def test_rollback_never_uses_requested_image(supervisor, store, runtime, ready_batch):
    runtime.fail_start.add(CANDIDATE.image_id)
    request_swap(store, ready_batch)

    assert await supervisor.tick() == SwapOutcome.ROLLED_BACK

    assert live_image(runtime) == SUBSTRATE_IMAGE
    starts = [image for kind, _, image in runtime.events if kind == "start"]
    assert starts[-1] == SUBSTRATE_IMAGE


async def test_unregistered_candidate_is_refused(supervisor, store, runtime, ready_batch, webhooks):
    request_swap(store, ready_batch, ImageRef(image_id="sim-unknown", built_from_rev="abc"))

    assert await supervisor.tick() == SwapOutcome.ROLLED_BACK

    assert live_image(runtime) == SUBSTRATE_IMAGE
    assert "not in the image registry" in webhooks.payloads[0]["detail"]["reason"]


async def test_failed_rollback_halts_swaps(supervisor, store, runtime, ready_batch, webhooks):
    runtime.fail_start.update({CANDIDATE.image_id, SUBSTRATE_IMAGE})
    request_swap(store, ready_batch)

    assert await supervisor.tick() == SwapOutcome.ROLLED_BACK

    assert supervisor.fatal() is not None
    assert webhooks.payloads[0]["detail"]["fatal"] is True
    (record,) = supervisor.history()
    assert record.fatal
    assert record.live_image is None

    runtime.fail_start.clear()
    second = request_swap(store, ready_batch)
    assert await supervisor.tick() is None
    assert store.exists(REQUEST_KEY)

    supervisor.clear_fatal()
    assert not store.exists(FATAL_KEY)
    assert await supervisor.tick() == SwapOutcome.COMMITTED
    assert webhooks.payloads[-1]["delivery_id"] == second.request_id


async def test_replayed_request_is_dropped(supervisor, store, ready_batch, webhooks):
    request = request_swap(store, ready_batch)
    await supervisor.tick()

    write_swap_request(store, request)

    assert await supervisor.tick() is None
    assert not store.exists(REQUEST_KEY)
    assert len(webhooks.payloads) == 1


async def test_unreadable_request_is_discarded(supervisor, store):
    store.write(REQUEST_KEY, b"{broken")

    assert await supervisor.tick() is None
    assert not store.exists(REQUEST_KEY)


async def test_undelivered_webhook_is_redelivered_on_recover(supervisor, store, ready_batch, webhooks):
    webhooks.status_codes.extend([503, 503, 503])
    request = request_swap(store, ready_batch)
    await supervisor.tick()
    assert not supervisor.history()[0].webhook_delivered

    await supervisor.recover()
    await supervisor.recover()

    delivered = [p for p, code in zip(webhooks.payloads, [503, 503, 503, 200, 200]) if code == 200]
    assert [p["delivery_id"] for p in delivered] == [request.request_id]
    assert supervisor.history()[0].webhook_delivered


@pytest.mark.parametrize("checkpoint", list(SwapCheckpoint))
async def test_crash_recovery_keeps_exactly_one_image_live(
    checkpoint, make_supervisor, store, runtime, ready_batch, webhooks
):
    def crash_at(reached: SwapCheckpoint) -> None:
        if reached == checkpoint:
            raise Crash(checkpoint.value)

    crashing = make_supervisor(checkpoint_hook=crash_at)
    crashing.ensure_initial()
    request = request_swap(store, ready_batch)
    with pytest.raises(Crash):
        await crashing.tick()

    restarted = make_supervisor()
    restarted.ensure_initial()
    await restarted.recover()
    await restarted.tick()
    await restarted.recover()

    committed = checkpoint in (SwapCheckpoint.DECIDED, SwapCheckpoint.ARCHIVED)
    running = [c for c in runtime.containers() if c.running]
    assert [c.name for c in running] == [CONTAINER]
    assert live_image(runtime) == (CANDIDATE.image_id if committed else SUBSTRATE_IMAGE)
    assert not store.exists(JOURNAL_KEY)
    assert not store.exists(REQUEST_KEY)

    (record,) = restarted.history()
    assert record.outcome == (SwapOutcome.COMMITTED if committed else SwapOutcome.ROLLED_BACK)
    assert [p["delivery_id"] for p in webhooks.payloads] == [request.request_id]
    assert webhooks.payloads[0]["status"] == ("success" if committed else "rolled-back")


async def test_corrupt_journal_restores_last_known_good(supervisor, store, runtime):
    runtime.stop_and_remove(CONTAINER)
    runtime.start(CONTAINER, CANDIDATE.image_id)
    store.write(JOURNAL_KEY, b"{not a journal")

    assert await supervisor.recover() is None

    assert live_image(runtime) == SUBSTRATE_IMAGE
    assert not store.exists(JOURNAL_KEY)


async def test_restore_compares_resolved_image_ids(make_supervisor, store, runtime):
    runtime.image_ids[SUBSTRATE_IMAGE] = "sha256:5ub5tr4te"
    supervisor = make_supervisor()
    supervisor.ensure_initial()
    store.write(JOURNAL_KEY, b"{not a journal")

    await supervisor.recover()

    assert live_image(runtime) == "sha256:5ub5tr4te"
    assert [e for e in runtime.events if e[0] == "start"] == [("start", CONTAINER, SUBSTRATE_IMAGE)]


async def test_operation_is_counted_while_open(supervisor):
    async with supervisor.operation():
        assert supervisor.operations_in_flight == 1
        async with supervisor.operation(gated=False):
            assert supervisor.operations_in_flight == 2

    assert supervisor.operations_in_flight == 0
    assert not supervisor.lock.locked()


async def test_ungated_operation_runs_during_swap(supervisor):
    async with supervisor.lock:
        async with supervisor.operation(gated=False):
            assert supervisor.operations_in_flight == 1
