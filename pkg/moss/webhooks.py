import enum
from typing import Any

import httpx
from pydantic import BaseModel
from tenacity import (
    AsyncRetrying,
    RetryError,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
)

from moss.config import WEBHOOK_URL
from moss.core.models import new_id, utcnow
from moss.errors import DeliveryFailed
from moss.logger import get_logger

logger = get_logger("webhooks")

WEBHOOK_ATTEMPTS = 3


class WebhookEvent(enum.Enum):
    EVOLUTION_CONVERGED = "evolution-converged"
    EVOLUTION_FAILED = "evolution-failed"
    APPLY_COMPLETE = "apply-complete"


class WebhookPayload(BaseModel):
    event: WebhookEvent
    run_id: str | None = None
    batch_id: str | None = None
    status: str
    detail: dict[str, Any] = {}
    ts: str
    # Receivers drop repeats of a delivery_id.
    delivery_id: str


class DeliveryResult(BaseModel):
    delivered: bool
    attempts: int
    error: str | None = None


class _RetryableStatus(Exception):
    pass


class WebhookDispatcher:
    """POSTs lifecycle events to the gateway's hook endpoint.

    Connection failures and 5xx responses are retried with exponential
    backoff, three attempts in total. Failed delivery is logged and reported,
    never raised, so callers commit their state transition regardless.
    """

    def __init__(
        self,
        url: str | None = WEBHOOK_URL,
        transport: httpx.AsyncBaseTransport | None = None,
        backoff: float = 0.5,
        timeout: float = 5.0,
    ):
        self.url = url
        self.transport = transport
        self.backoff = backoff
        self.timeout = timeout

    async def fire(
        self,
        event: WebhookEvent,
        *,
        status: str,
        run_id: str | None = None,
        batch_id: str | None = None,
        detail: dict[str, Any] | None = None,
        delivery_id: str | None = None,
    ) -> DeliveryResult:
        payload = WebhookPayload(
            event=event,
            run_id=run_id,
            batch_id=batch_id,
            status=status,
            detail=detail or {},
            ts=utcnow().isoformat(),
            delivery_id=delivery_id or new_id("dlv"),
        )
        if not self.url:
            logger.warning(f"no webhook URL configured; dropping {event.value}")
            return DeliveryResult(delivered=False, attempts=0, error="no webhook url")
        try:
            attempts = await self._deliver(payload)
        except DeliveryFailed as e:
            logger.error(f"webhook {event.value} not delivered: {e.message}")
            return DeliveryResult(delivered=False, attempts=WEBHOOK_ATTEMPTS, error=e.message)
        logger.info(f"webhook {event.value} status={status} delivered after {attempts} attempt(s)")
        return DeliveryResult(delivered=True, attempts=attempts)

    async def _deliver(self, payload: WebhookPayload) -> int:
        body = payload.model_dump(mode="json")
        attempts = 0
        async with httpx.AsyncClient(transport=self.transport, timeout=self.timeout) as client:
            try:
                async for attempt in AsyncRetrying(
                    stop=stop_after_attempt(WEBHOOK_ATTEMPTS),
                    wait=wait_exponential(multiplier=self.backoff, max=10 * self.backoff),
                    retry=retry_if_exception_type((httpx.TransportError, _RetryableStatus)),
                ):
                    with attempt:
                        attempts += 1
                        response = await client.post(self.url, json=body)
                        if response.status_code >= 500:
                            raise _RetryableStatus(f"HTTP {response.status_code}")
                        if response.status_code >= 400:
                            raise DeliveryFailed(f"rejected with HTTP {response.status_code}")
                        if attempts > 1:
                            logger.warning(f"webhook {payload.event.value} needed {attempts} attempts")
            except RetryError as e:
                raise DeliveryFailed(f"{attempts} attempts to {self.url} failed: {e.last_attempt.exception()}") from e
        return attempts
