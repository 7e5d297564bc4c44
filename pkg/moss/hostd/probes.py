"""Post-swap health probing.

A probe runs four checks: heartbeat freshness, container running, and two
substrate-level CLI status commands. A window of samples commits the swap at
the first sample completing a run of consecutive passes; otherwise the swap
rolls back when the window is exhausted.
"""

import asyncio
import enum
import json
from collections.abc import Awaitable, Callable, Sequence
from datetime import datetime
from pathlib import Path

from pydantic import BaseModel, model_validator

from moss.config import Timings, load_config_file
from moss.core.models import utcnow
from moss.errors import RuntimeFailure
from moss.hostd.runtime import ContainerRuntime
from moss.logger import get_logger

logger = get_logger("hostd.probes")

REQUIRED_CONSECUTIVE_PASSES = 3
CHECK_NAMES = ("heartbeat_fresh", "container_running", "cli_probe_a", "cli_probe_b")
DEFAULT_CLI_PROBES = [["moss-sandbox-status", "gateway"], ["moss-sandbox-status", "hooks"]]


def get_cli_probes() -> list[list[str]]:
    probes = load_config_file().get("cli_probes") or DEFAULT_CLI_PROBES
    if len(probes) != 2:
        raise ValueError("cli_probes must name exactly two status commands")
    return probes


class ProbeReport(BaseModel):
    sample_index: int
    ts: datetime
    checks: dict[str, bool]
    passed: bool = False

    @model_validator(mode="after")
    def _conjunction(self) -> "ProbeReport":
        self.passed = all(self.checks.get(name, False) for name in CHECK_NAMES)
        return self


class ProbeOutcome(enum.Enum):
    COMMITTED = "committed"
    ROLLED_BACK = "rolled_back"


class ProbeWindowResult(BaseModel):
    outcome: ProbeOutcome
    samples: list[ProbeReport]
    commit_index: int | None = None


def heartbeat_age(heartbeat_path: Path, now: datetime) -> float | None:
    """Seconds since the heartbeat's embedded ``ts``; None when unreadable."""
    try:
        data = json.loads(heartbeat_path.read_text(encoding="utf-8"))
        return (now - datetime.fromisoformat(data["ts"])).total_seconds()
    except (OSError, ValueError, KeyError, TypeError):
        return None


def probe_decision(passes: Sequence[bool], required: int = REQUIRED_CONSECUTIVE_PASSES) -> int | None:
    """Index of the first sample completing ``required`` consecutive passes, else None."""
    streak = 0
    for index, passed in enumerate(passes):
        streak = streak + 1 if passed else 0
        if streak >= required:
            return index
    return None


async def health_probe(
    runtime: ContainerRuntime,
    container: str,
    *,
    heartbeat_path: Path,
    freshness: float,
    cli_probes: list[list[str]],
    sample_index: int = 0,
    clock: Callable[[], datetime] = utcnow,
) -> ProbeReport:
    now = clock()
    age = heartbeat_age(heartbeat_path, now)
    checks = {"heartbeat_fresh": age is not None and age <= freshness}

    try:
        info = await asyncio.to_thread(runtime.inspect, container)
    except RuntimeFailure as e:
        logger.warning(f"inspect {container} failed: {e.message}")
        info = None
    checks["container_running"] = bool(info and info.running)

    for name, command in zip(("cli_probe_a", "cli_probe_b"), cli_probes):
        try:
            result = await asyncio.to_thread(runtime.exec, container, command)
            checks[name] = result.exit_code == 0
        except RuntimeFailure:
            checks[name] = False

    return ProbeReport(sample_index=sample_index, ts=now, checks=checks)


async def run_probe_window(
    probe: Callable[[int], Awaitable[ProbeReport]],
    timings: Timings,
    sleep: Callable[[float], Awaitable[None]] = asyncio.sleep,
    required: int = REQUIRED_CONSECUTIVE_PASSES,
) -> ProbeWindowResult:
    """Sample at t=0, sample, 2*sample, ... within the window; stop at the first commit."""
    samples: list[ProbeReport] = []
    for index in range(timings.probe_samples):
        if index:
            await sleep(timings.probe_sample)
        report = await probe(index)
        samples.append(report)
        logger.info(f"probe sample {index}: pass={report.passed} {report.checks}")
        if probe_decision([s.passed for s in samples], required) == index:
            return ProbeWindowResult(outcome=ProbeOutcome.COMMITTED, samples=samples, commit_index=index)
    return ProbeWindowResult(outcome=ProbeOutcome.ROLLED_BACK, samples=samples)
