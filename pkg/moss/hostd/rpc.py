"""Newline-delimited JSON RPC over a local domain socket.

Request:  ``{"id": "...", "op": "family.name", "params": {...}}``
Response: ``{"id": "...", "ok": true, "result": ...}`` or
          ``{"id": "...", "ok": false, "error": {"code": "...", "message": "..."}}``

Requests on one connection are handled concurrently and answered in
completion order; clients match responses by id.
"""

import asyncio
import itertools
import json
import os
from collections.abc import Awaitable, Callable
from typing import Any

from pydantic import BaseModel

from moss.errors import MalformedFrame, MossError, TransportFailure, UnknownOp, error_from_detail
from moss.logger import get_logger

logger = get_logger("hostd.rpc")

# Stage outputs and trial transcripts travel inline.
FRAME_LIMIT = 16 * 1024 * 1024

Handler = Callable[[dict], Awaitable[Any]]


class RpcRequest(BaseModel):
    id: str
    op: str
    params: dict = {}


def to_jsonable(value: Any) -> Any:
    if isinstance(value, BaseModel):
        return value.model_dump(mode="json")
    if isinstance(value, list):
        return [to_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: to_jsonable(v) for k, v in value.items()}
    return value


class RpcServer:
    def __init__(self, handlers: dict[str, Handler]):
        self.handlers = handlers
        self._server: asyncio.AbstractServer | None = None

    async def start(self, socket_path: str) -> None:
        if os.path.exists(socket_path):
            os.remove(socket_path)
        self._server = await asyncio.start_unix_server(self._on_connection, path=socket_path, limit=FRAME_LIMIT)
        logger.info(f"RPC listening on {socket_path} ({len(self.handlers)} ops)")

    async def serve_forever(self, socket_path: str) -> None:
        await self.start(socket_path)
        assert self._server is not None
        async with self._server:
            await self._server.serve_forever()

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None

    async def dispatch(self, request: RpcRequest) -> dict:
        handler = self.handlers.get(request.op)
        try:
            if handler is None:
                raise UnknownOp(f"unknown op: {request.op}")
            result = await handler(request.params)
            return {"id": request.id, "ok": True, "result": to_jsonable(result)}
        except MossError as e:
            return {"id": request.id, "ok": False, "error": e.as_detail()}
        except Exception as e:
            logger.error(f"op {request.op} failed: {e}", exc_info=True)
            return {"id": request.id, "ok": False, "error": {"code": "internal_error", "message": str(e)}}

    async def _on_connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        write_lock = asyncio.Lock()
        tasks: set[asyncio.Task] = set()

        async def respond(payload: dict) -> None:
            async with write_lock:
                writer.write(json.dumps(payload).encode("utf-8") + b"\n")
                await writer.drain()

        async def handle(request: RpcRequest) -> None:
            try:
                await respond(await self.dispatch(request))
            except ConnectionError:
                pass

        try:
            while True:
                try:
                    line = await reader.readline()
                except (ValueError, asyncio.LimitOverrunError):
                    await respond(_malformed(None, "frame exceeds size limit"))
                    break
                if not line:
                    break
                try:
                    request = RpcRequest.model_validate_json(line)
                except ValueError as e:
                    await respond(_malformed(_frame_id(line), f"malformed frame: {e}"))
                    break
                task = asyncio.create_task(handle(request))
                tasks.add(task)
                task.add_done_callback(tasks.discard)
            if tasks:
                await asyncio.gather(*tasks, return_exceptions=True)
        except ConnectionError:
            pass
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except ConnectionError:
                pass


def _malformed(request_id: str | None, message: str) -> dict:
    return {"id": request_id, "ok": False, "error": MalformedFrame(message).as_detail()}


def _frame_id(line: bytes) -> str | None:
    try:
        data = json.loads(line)
    except ValueError:
        return None
    return data.get("id") if isinstance(data, dict) else None


class RpcClient:
    """Multiplexing client; one socket connection shared by concurrent calls."""

    def __init__(self, socket_path: str):
        self.socket_path = socket_path
        self._reader: asyncio.StreamReader | None = None
        self._writer: asyncio.StreamWriter | None = None
        self._reader_task: asyncio.Task | None = None
        self._pending: dict[str, asyncio.Future] = {}
        self._ids = itertools.count(1)
        self._connect_lock = asyncio.Lock()
        self._write_lock = asyncio.Lock()

    async def _ensure_connected(self) -> None:
        async with self._connect_lock:
            if self._writer is not None:
                return
            try:
                self._reader, self._writer = await asyncio.open_unix_connection(self.socket_path, limit=FRAME_LIMIT)
            except OSError as e:
                raise TransportFailure(f"cannot reach hostd at {self.socket_path}: {e}") from e
            self._reader_task = asyncio.create_task(self._read_responses())

    async def _read_responses(self) -> None:
        assert self._reader is not None
        try:
            while line := await self._reader.readline():
                payload = json.loads(line)
                future = self._pending.pop(str(payload.get("id")), None)
                if future is not None and not future.done():
                    future.set_result(payload)
        except (ConnectionError, ValueError) as e:
            logger.warning(f"RPC connection lost: {e}")
        finally:
            for future in self._pending.values():
                if not future.done():
                    future.set_exception(TransportFailure(f"connection to {self.socket_path} closed"))
            self._pending.clear()
            self._writer = None

    async def call(self, op: str, params: dict | None = None) -> Any:
        await self._ensure_connected()
        request_id = f"req-{next(self._ids)}"
        future: asyncio.Future = asyncio.get_running_loop().create_future()
        self._pending[request_id] = future
        frame = json.dumps({"id": request_id, "op": op, "params": params or {}}).encode("utf-8") + b"\n"
        try:
            async with self._write_lock:
                assert self._writer is not None
                self._writer.write(frame)
                await self._writer.drain()
        except (OSError, AssertionError) as e:
            self._pending.pop(request_id, None)
            raise TransportFailure(f"failed to send {op}: {e}") from e
        payload = await future
        if not payload.get("ok"):
            raise error_from_detail(payload.get("error") or {})
        return payload.get("result")

    async def close(self) -> None:
        if self._writer is not None:
            self._writer.close()
            try:
                await self._writer.wait_closed()
            except ConnectionError:
                pass
        if self._reader_task is not None:
            await asyncio.gather(self._reader_task, return_exceptions=True)
            self._reader_task = None

    async def __aenter__(self) -> "RpcClient":
        return self

    async def __aexit__(self, *exc) -> None:
        await self.close()
