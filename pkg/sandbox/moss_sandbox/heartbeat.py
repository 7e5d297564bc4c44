import asyncio
import json
import logging
from datetime import datetime
from pathlib import Path

from moss.core.models import utcnow
from moss.core.state_store import atomic_write

logger = logging.getLogger(__name__)


class Heartbeat:
    """Periodically rewrites ``{"ts": ...}`` into the user-state volume.

    The host-daemon's post-swap probe treats a heartbeat older than the
    freshness bound as a failed sample. ``frozen`` stops refreshing so tests
    can force a rollback.
    """

    def __init__(self, path: Path, interval: float):
        self.path = path
        self.interval = interval
        self.frozen = False
        self.last_beat: datetime | None = None

    def beat(self, now: datetime | None = None) -> bool:
        if self.frozen:
            return False
        now = now or utcnow()
        atomic_write(self.path, json.dumps({"ts": now.isoformat()}).encode("utf-8"))
        self.last_beat = now
        return True

    def set_frozen(self, frozen: bool) -> None:
        if frozen != self.frozen:
            logger.warning(f"Heartbeat {'frozen' if frozen else 'resumed'}")
        self.frozen = frozen

    async def run(self) -> None:
        while True:
            self.beat()
            await asyncio.sleep(self.interval)
