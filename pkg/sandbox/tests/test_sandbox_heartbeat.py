import asyncio
import json
from datetime import datetime, timezone

UTC = timezone.utc

from moss_sandbox.heartbeat import Heartbeat


def test_beat_writes_timestamp(tmp_path):
    heartbeat = Heartbeat(tmp_path / "heartbeat.json", interval=0.01)
    now = datetime(2026, 1, 5, 9, 0, tzinfo=UTC)

    assert heartbeat.beat(now) is True
    assert json.loads(heartbeat.path.read_text()) == {"ts": now.isoformat()}
    assert heartbeat.last_beat == now


def test_frozen_heartbeat_stops_refreshing(tmp_path):
    heartbeat = Heartbeat(tmp_path / "heartbeat.json", interval=0.01)
    first = datetime(2026, 1, 5, 9, 0, tzinfo=UTC)
    heartbeat.beat(first)

    heartbeat.set_frozen(True)

    assert heartbeat.beat(datetime(2026, 1, 5, 9, 5, tzinfo=UTC)) is False
    assert json.loads(heartbeat.path.read_text()) == {"ts": first.isoformat()}

    heartbeat.set_frozen(False)
    assert heartbeat.beat() is True


async def test_run_refreshes_until_cancelled(tmp_path):
    heartbeat = Heartbeat(tmp_path / "heartbeat.json", interval=0.01)

    task = asyncio.create_task(heartbeat.run())
    await asyncio.sleep(0.05)
    task.cancel()
    await asyncio.gather(task, return_exceptions=True)

    assert heartbeat.path.exists()
    assert heartbeat.last_beat is not None
