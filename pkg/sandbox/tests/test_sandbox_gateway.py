import httpx
import pytest

from moss.core.state_store import StateStore
from moss.hostd.swap import REQUEST_KEY, SwapRequest
from moss_sandbox.gateway import create_gateway
from moss_sandbox.heartbeat import Heartbeat
from moss_sandbox.hooks import SystemMessageLog

SWAP_RESPONSE = {
    "request_id": "swp-1",
    "candidate_image": {"image_id": "moss-gateway:abc123", "built_from_rev": "abc123", "built_at": "2026-01-05T09:00:00Z"},
    "batch_id": "batch-1",
    "run_id": "run-1",
    "requested_at": "2026-01-05T09:00:00Z",
}

HOOK = {
    "event": "apply-complete",
    "status": "success",
    "detail": {"request_id": "swp-1", "live_image": "moss-gateway:abc123"},
    "ts": "2026-01-05T09:00:00+00:00",
    "delivery_id": "swp-1",
}


class EvoService:
    """Stands in for the evolution service behind ``/evo/*``."""

    def __init__(self):
        self.requests: list[httpx.Request] = []
        self.apply_status = 200
        self.unreachable = False

    def __call__(self, request: httpx.Request) -> httpx.Response:
        if self.unreachable:
            raise httpx.ConnectError("connection refused", request=request)
        self.requests.append(request)
        if request.url.path == "/evo/apply":
            if self.apply_status != 200:
                return httpx.Response(self.apply_status, json={"detail": {"code": "no_eligible_batch", "message": "nothing"}})
            return httpx.Response(200, json=SWAP_RESPONSE)
        if request.url.path == "/evo/status":
            return httpx.Response(200, json={"run_id": request.url.params.get("run_id")})
        return httpx.Response(404, json={"detail": "Not Found"})


@pytest.fixture
def evo():
    return EvoService()


@pytest.fixture
def store(tmp_path):
    return StateStore(tmp_path / "state")


@pytest.fixture
def gateway(tmp_path, store, evo):
    return create_gateway(
        store=store,
        heartbeat=Heartbeat(tmp_path / "heartbeat.json", 0.01),
        messages=SystemMessageLog(tmp_path / "messages.jsonl"),
        evo_url="http://evo",
        evo_transport=httpx.MockTransport(evo),
        run_heartbeat=False,
    )


@pytest.fixture
async def client(gateway):
    transport = httpx.ASGITransport(app=gateway)
    async with httpx.AsyncClient(transport=transport, base_url="http://gateway") as c:
        yield c


async def test_health(client):
    response = await client.get("/health")

    assert response.status_code == 200
    assert response.json()["heartbeat_frozen"] is False


class TestEvoForwarding:
    async def test_apply_publishes_swap_request(self, client, store):
        response = await client.post("/evo/apply", json={"batch_id": "batch-1"})

        assert response.status_code == 200
        written = store.read_model(REQUEST_KEY, SwapRequest)
        assert written is not None
        assert written.request_id == "swp-1"
        assert written.candidate_image.image_id == "moss-gateway:abc123"

    async def test_refused_apply_passes_through_without_a_request(self, client, store, evo):
        evo.apply_status = 409

        response = await client.post("/evo/apply", json={})

        assert response.status_code == 409
        assert response.json()["detail"]["code"] == "no_eligible_batch"
        assert not store.exists(REQUEST_KEY)

    async def test_query_parameters_are_forwarded(self, client, evo):
        response = await client.get("/evo/status", params={"run_id": "run-7"})

        assert response.status_code == 200
        assert response.json() == {"run_id": "run-7"}
        assert evo.requests[0].url.path == "/evo/status"

    async def test_unreachable_service_is_bad_gateway(self, client, evo):
        evo.unreachable = True

        response = await client.get("/evo/status")

        assert response.status_code == 502

    async def test_non_object_body_is_rejected(self, client, evo):
        response = await client.post("/evo/start", json=["not", "an", "object"])

        assert response.status_code == 400
        assert evo.requests == []


class TestHooks:
    async def test_hook_becomes_system_message_once(self, client):
        first = await client.post("/hooks/moss", json=HOOK)
        again = await client.post("/hooks/moss", json=HOOK)

        assert first.json() == {"accepted": True, "duplicate": False}
        assert again.json() == {"accepted": True, "duplicate": True}
        messages = (await client.get("/admin/messages")).json()
        assert len(messages) == 1
        assert "swp-1" in messages[0]["rendered_text"]
        assert "success" in messages[0]["rendered_text"]

    async def test_malformed_hook(self, client):
        response = await client.post("/hooks/moss", json={"event": "evolution-converged"})

        assert response.status_code == 400

    async def test_unknown_event(self, client):
        response = await client.post("/hooks/moss", json={**HOOK, "event": "something-else"})

        assert response.status_code == 400


async def test_fault_freezes_heartbeat(client, gateway):
    response = await client.post("/admin/fault", json={"frozen": True})

    assert response.json() == {"frozen": True}
    assert gateway.state.heartbeat.frozen is True
    assert (await client.get("/health")).json()["heartbeat_frozen"] is True
