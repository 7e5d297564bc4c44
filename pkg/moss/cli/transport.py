"""The CLI's two transports.

status, batches, batch, start, stop, restart and apply go over HTTP to the
gateway's ``/evo/*`` group. flag and catch-up go over the hostd socket.
"""

import asyncio
from http import HTTPStatus
from typing import Any

import httpx
from httpx_retries import Retry, RetryTransport
from pydantic import BaseModel

from moss.config import GATEWAY_URL, HOSTD_SOCKET
from moss.errors import MossError, TransportFailure, error_from_detail
from moss.hostd.rpc import RpcClient


class CliConfig(BaseModel):
    gateway_url: str = GATEWAY_URL
    hostd_socket: str = HOSTD_SOCKET


class GatewayClient:
    """Synchronous HTTP client for the evolution-control endpoint group."""

    def __init__(self, base_url: str, client: httpx.Client | None = None, timeout: float = 30):
        self.base_url = base_url.rstrip("/")
        self.client = client
        self.timeout = timeout

    def _new_client(self) -> httpx.Client:
        retry = Retry(
            total=3,
            status_forcelist=[
                HTTPStatus.TOO_MANY_REQUESTS,
                HTTPStatus.BAD_GATEWAY,
                HTTPStatus.SERVICE_UNAVAILABLE,
                HTTPStatus.GATEWAY_TIMEOUT,
            ],
        )
        transport = RetryTransport(transport=httpx.HTTPTransport(), retry=retry)
        return httpx.Client(base_url=self.base_url, transport=transport, timeout=self.timeout)

    def request(self, method: str, path: str, json: dict | None = None, params: dict | None = None) -> Any:
        """Send one request and return the decoded body.

        Raises:
            TransportFailure: If the gateway is unreachable or answers 5xx.
            MossError: The domain error named by a 4xx ``{code, message}`` detail.

        """
        endpoint = f"{method} {self.base_url}{path}"
        params = {k: v for k, v in (params or {}).items() if v is not None}
        try:
            if self.client is not None:
                response = self.client.request(method, path, json=json, params=params)
            else:
                with self._new_client() as client:
                    response = client.request(method, path, json=json, params=params)
        except httpx.TransportError as e:
            raise TransportFailure(f"{endpoint}: {e}") from e

        if response.status_code >= 500:
            raise TransportFailure(f"{endpoint} returned HTTP {response.status_code}")
        if response.status_code >= 400:
            try:
                detail = response.json().get("detail")
            except ValueError:
                detail = response.text
            if isinstance(detail, dict) and "code" in detail:
                raise error_from_detail(detail)
            raise MossError(f"{endpoint} returned HTTP {response.status_code}: {detail}")
        return response.json()

    def get(self, path: str, **params) -> Any:
        return self.request("GET", path, params=params)

    def post(self, path: str, body: dict) -> Any:
        return self.request("POST", path, json=body)


class HostdClient:
    """One-shot RPC calls over the hostd socket."""

    def __init__(self, socket_path: str):
        self.socket_path = socket_path

    async def _call(self, op: str, params: dict) -> Any:
        async with RpcClient(self.socket_path) as client:
            return await client.call(op, params)

    def call(self, op: str, params: dict | None = None) -> Any:
        return asyncio.run(self._call(op, params or {}))
