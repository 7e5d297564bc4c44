import shutil
from dataclasses import dataclass

import pytest

from moss.config import Timings
from moss.core.models import Batch
from moss.core.state_store import BatchRepository, StateStore
from moss.hostd.images import ImageRegistry, SimulatedBuilder
from moss.hostd.runtime import SimulatedRuntime
from moss.pipeline.host_ops import LocalHostOps
from moss.pipeline.orchestrator import Orchestrator
from moss.pipeline.workspace import GitWorkspace
from moss.runners import RunnerPool
from moss.runners.scripted import ScriptedRunner, ScriptEntry
from moss.trials.workers import TrialHost
from tests.factories import WebhookRecorder, make_batch


@pytest.fixture
def store(tmp_path) -> StateStore:
    return StateStore(tmp_path / "state")


@pytest.fixture
def fast_timings() -> Timings:
    # 18 probe samples, like the production 90s/5s window.
    return Timings(
        swap_poll=0.01,
        probe_window=0.09,
        probe_sample=0.005,
        heartbeat_freshness=30.0,
        heartbeat_refresh=0.01,
        trial_timeout=5.0,
        runner_timeout=10.0,
    )


@pytest.fixture
def runtime() -> SimulatedRuntime:
    return SimulatedRuntime()


@pytest.fixture
def workspace(tmp_path) -> GitWorkspace:
    if shutil.which("git") is None:
        pytest.skip("git is not installed")
    return GitWorkspace.init(tmp_path / "substrate")


@pytest.fixture
def webhooks() -> WebhookRecorder:
    return WebhookRecorder()


@pytest.fixture
def sealed_batch(store) -> Batch:
    batch = make_batch()
    BatchRepository(store).save(batch)
    return batch


@dataclass
class Harness:
    orchestrator: Orchestrator
    runner: ScriptedRunner
    builder: SimulatedBuilder


@pytest.fixture
def make_harness(store, workspace, runtime, fast_timings, webhooks):
    """Orchestrator over a scripted runner, the simulated builder and simulated trial workers."""

    def build(entries: list[ScriptEntry], fail_revs: set[str] | None = None) -> Harness:
        runner = ScriptedRunner(store, entries)
        pool = RunnerPool(store, default="scripted", stage_overrides={}, mode="direct")
        pool.install("scripted", runner)
        builder = SimulatedBuilder(workspace, fail_revs)
        host = LocalHostOps(builder, ImageRegistry(store), TrialHost(runtime, store, timings=fast_timings))
        orchestrator = Orchestrator(store, pool, workspace, host, webhooks.dispatcher(), timings=fast_timings)
        return Harness(orchestrator=orchestrator, runner=runner, builder=builder)

    return build
