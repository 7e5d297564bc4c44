"""Webhook sink: maps moss lifecycle events to system messages for the agent's next turn."""

import asyncio
import json
import logging
from datetime import datetime
from pathlib import Path

import aiofiles
import yaml
from pydantic import BaseModel, Field, model_validator

from moss.core.models import utcnow
from moss.webhooks import WebhookEvent, WebhookPayload

logger = logging.getLogger(__name__)

DEFAULT_HOOK_TEMPLATES = {
    WebhookEvent.EVOLUTION_CONVERGED.value: (
        "[moss] Evolution run {run_id} converged on batch {batch_id}. "
        "Candidate {candidate_image} (peak iteration {peak_iteration}) is ready; "
        "tell the user and run `moss evo apply` only if they authorize it."
    ),
    WebhookEvent.EVOLUTION_FAILED.value: (
        "[moss] Evolution run {run_id} on batch {batch_id} ended {status}: {reason}. "
        "Nothing was changed."
    ),
    WebhookEvent.APPLY_COMPLETE.value: (
        "[moss] Apply {request_id} finished with status {status}; "
        "live image is {live_image}."
    ),
}


class _Fields(dict):
    def __missing__(self, key: str) -> str:
        return "-"


class HookMapping(BaseModel):
    """Event name -> system-message template (``str.format`` fields from the payload and its detail)."""

    templates: dict[str, str] = Field(default_factory=lambda: dict(DEFAULT_HOOK_TEMPLATES))

    @model_validator(mode="after")
    def _covers_all_events(self) -> "HookMapping":
        missing = [e.value for e in WebhookEvent if e.value not in self.templates]
        if missing:
            raise ValueError(f"hook mapping has no template for {missing}")
        return self

    @classmethod
    def load(cls, path: str | Path | None) -> "HookMapping":
        if not path:
            return cls()
        with open(path, "r", encoding="utf-8") as f:
            overrides = yaml.safe_load(f) or {}
        return cls(templates={**DEFAULT_HOOK_TEMPLATES, **overrides})

    def render(self, payload: WebhookPayload) -> str:
        fields = _Fields(payload.detail)
        fields.update(
            event=payload.event.value,
            status=payload.status,
            run_id=payload.run_id or "-",
            batch_id=payload.batch_id or "-",
        )
        return self.templates[payload.event.value].format_map(fields)


class SystemMessage(BaseModel):
    ts: datetime
    event: WebhookEvent
    delivery_id: str
    rendered_text: str


class SystemMessageLog:
    """Append-only message log, one entry per distinct webhook delivery.

    Appends are serialized; a repeated ``delivery_id`` is acknowledged but not
    appended again.
    """

    def __init__(self, path: Path | None = None):
        self.path = path
        self._entries: list[SystemMessage] = []
        self._lock = asyncio.Lock()
        if path is not None and path.exists():
            for line in path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    self._entries.append(SystemMessage.model_validate_json(line))

    def entries(self) -> list[SystemMessage]:
        return list(self._entries)

    def _seen(self, delivery_id: str) -> bool:
        return any(m.delivery_id == delivery_id for m in self._entries)

    async def append(self, payload: WebhookPayload, mapping: HookMapping) -> SystemMessage | None:
        async with self._lock:
            if self._seen(payload.delivery_id):
                logger.info(f"Duplicate delivery {payload.delivery_id} ignored")
                return None
            message = SystemMessage(
                ts=utcnow(),
                event=payload.event,
                delivery_id=payload.delivery_id,
                rendered_text=mapping.render(payload),
            )
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                async with aiofiles.open(self.path, "a", encoding="utf-8") as f:
                    await f.write(json.dumps(message.model_dump(mode="json")) + "\n")
            self._entries.append(message)
            logger.info(f"System message queued for {payload.event.value}")
            return message
