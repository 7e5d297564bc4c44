"""Simulated substrate gateway.

Hosts the evolution-control endpoint group (forwarded to the evolution
service), the webhook sink that turns moss events into system messages, and
the heartbeat the host-daemon probes after a swap.
"""

import asyncio
import logging
from contextlib import asynccontextmanager
from http import HTTPStatus

import httpx
import uvicorn
from fastapi import FastAPI, HTTPException, Request, status
from fastapi.responses import JSONResponse
from httpx_retries import Retry, RetryTransport
from pydantic import BaseModel, ValidationError

from moss.config import get_timings
from moss.core.state_store import StateStore
from moss.hostd.swap import SwapRequest, write_swap_request
from moss.webhooks import WebhookPayload
from moss_sandbox.config import (
    EVOLUTION_SERVICE_URL,
    GATEWAY_HOST,
    GATEWAY_PORT,
    HEARTBEAT_FILE,
    HOOK_MAPPING_FILE,
    MESSAGE_LOG_FILE,
)
from moss_sandbox.heartbeat import Heartbeat
from moss_sandbox.hooks import HookMapping, SystemMessage, SystemMessageLog

# Configure logging
logging.basicConfig(
    level=logging.INFO, format="[%(asctime)s] %(message)s", datefmt="%Y-%m-%d %H:%M:%S"
)
logger = logging.getLogger(__name__)


class FaultRequest(BaseModel):
    frozen: bool


class FaultState(BaseModel):
    frozen: bool


async def _json_body(request: Request) -> dict:
    try:
        body = await request.json()
    except ValueError:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail="Body must be a JSON object")
    if not isinstance(body, dict):
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail="Body must be a JSON object")
    return body


def create_gateway(
    *,
    store: StateStore | None = None,
    heartbeat: Heartbeat | None = None,
    messages: SystemMessageLog | None = None,
    mapping: HookMapping | None = None,
    evo_url: str = EVOLUTION_SERVICE_URL,
    evo_transport: httpx.AsyncBaseTransport | None = None,
    run_heartbeat: bool = True,
) -> FastAPI:
    store = store or StateStore()
    heartbeat = heartbeat or Heartbeat(HEARTBEAT_FILE, get_timings().heartbeat_refresh)
    messages = messages or SystemMessageLog(MESSAGE_LOG_FILE)
    mapping = mapping or HookMapping.load(HOOK_MAPPING_FILE)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        task = asyncio.create_task(heartbeat.run()) if run_heartbeat else None
        logger.info(f"Gateway up; forwarding /evo/* to {evo_url}")
        yield
        if task is not None:
            task.cancel()
            await asyncio.gather(task, return_exceptions=True)

    app = FastAPI(lifespan=lifespan)
    app.state.heartbeat = heartbeat
    app.state.messages = messages

    def evo_client() -> httpx.AsyncClient:
        """HTTP client for the evolution service with retry capabilities."""
        transport = evo_transport
        if transport is None:
            retry = Retry(
                total=3,
                status_forcelist=[
                    HTTPStatus.TOO_MANY_REQUESTS,
                    HTTPStatus.BAD_GATEWAY,
                    HTTPStatus.SERVICE_UNAVAILABLE,
                    HTTPStatus.GATEWAY_TIMEOUT,
                ],
            )
            transport = RetryTransport(transport=httpx.AsyncHTTPTransport(), retry=retry)
        return httpx.AsyncClient(base_url=evo_url, transport=transport, timeout=60)

    async def forward(request: Request, path: str) -> httpx.Response:
        body = await _json_body(request) if request.method == "POST" else None
        try:
            async with evo_client() as client:
                return await client.request(
                    request.method,
                    f"/evo/{path}",
                    params=dict(request.query_params),
                    json=body,
                )
        except httpx.TransportError as e:
            logger.error(f"Evolution service unreachable: {e}")
            raise HTTPException(status_code=status.HTTP_502_BAD_GATEWAY, detail=f"evolution service unreachable: {e}")

    @app.get("/health")
    def health():
        return {"message": "Gateway is running.", "heartbeat_frozen": heartbeat.frozen}

    @app.post("/evo/apply")
    async def evo_apply(request: Request):
        """Forward apply and publish the returned swap request for the host-daemon."""
        response = await forward(request, "apply")
        if response.status_code != status.HTTP_200_OK:
            return JSONResponse(status_code=response.status_code, content=response.json())
        swap_request = SwapRequest.model_validate(response.json())
        write_swap_request(store, swap_request)
        return swap_request

    @app.api_route("/evo/{path:path}", methods=["GET", "POST"])
    async def evo_forward(path: str, request: Request):
        response = await forward(request, path)
        return JSONResponse(status_code=response.status_code, content=response.json())

    @app.post("/hooks/moss")
    async def receive_hook(request: Request):
        body = await _json_body(request)
        try:
            payload = WebhookPayload.model_validate(body)
        except ValidationError as e:
            raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=f"Malformed webhook: {e.errors()[0]['msg']}")
        message = await messages.append(payload, mapping)
        return {"accepted": True, "duplicate": message is None}

    @app.post("/admin/fault", response_model=FaultState)
    def set_fault(req: FaultRequest):
        """Freeze or resume the heartbeat."""
        heartbeat.set_frozen(req.frozen)
        return FaultState(frozen=heartbeat.frozen)

    @app.get("/admin/messages", response_model=list[SystemMessage])
    def list_messages():
        return messages.entries()

    return app


app = create_gateway()


def main() -> None:
    uvicorn.run("moss_sandbox.gateway:app", host=GATEWAY_HOST, port=GATEWAY_PORT)
