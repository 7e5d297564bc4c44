"""Host-daemon: RPC server, image builds, trial workers, auto-scan and the swap supervisor."""

import asyncio
from dataclasses import dataclass, field

from moss.autoscan.engine import AutoscanEngine
from moss.autoscan.evaluators import ChunkEvaluator, RunnerChunkEvaluator, ScriptedChunkEvaluator
from moss.config import AUTOSCAN_SIDECAR, HOSTD_SOCKET, RUNTIME, WORKSPACE_DIR
from moss.core.models import ImageRef
from moss.core.state_store import StateStore
from moss.errors import LaunchFailure
from moss.hostd.images import DockerBuilder, ImageBuilder, ImageRegistry, SimulatedBuilder
from moss.hostd.rpc import Handler, RpcServer
from moss.hostd.runtime import ContainerRuntime, get_runtime
from moss.hostd.swap import SwapSupervisor
from moss.logger import get_logger
from moss.pipeline.workspace import GitWorkspace
from moss.runners import InvocationPlan, Runner, RunnerHandle, RunnerPool, RunnerSpec
from moss.trials.workers import TrialHost, TrialTask
from moss.webhooks import WebhookDispatcher

logger = get_logger("hostd")


@dataclass
class _Invocation:
    runner: Runner
    plan: InvocationPlan
    handle: RunnerHandle | None = None


@dataclass
class HostDaemon:
    store: StateStore
    runtime: ContainerRuntime
    images: ImageRegistry
    builder: ImageBuilder
    supervisor: SwapSupervisor
    autoscan: AutoscanEngine
    runners: RunnerPool
    trials: TrialHost
    _invocations: dict[str, _Invocation] = field(default_factory=dict)

    def handlers(self) -> dict[str, Handler]:
        return {
            "runner.prepare": self.runner_prepare,
            "runner.launch": self.runner_launch,
            "runner.collect": self.runner_collect,
            "runner.cancel": self.runner_cancel,
            "trial.spawn": self.trial_spawn,
            "trial.exec": self.trial_exec,
            "trial.teardown": self.trial_teardown,
            "image.build": self.image_build,
            "image.tag": self.image_tag,
            "image.lkg": self.image_lkg,
            "autoscan.catch_up": self.autoscan_catch_up,
            "autoscan.flag": self.autoscan_flag,
        }

    # --- runner.* ---

    def _invocation(self, invocation_id: str) -> _Invocation:
        entry = self._invocations.get(invocation_id)
        if entry is None:
            raise LaunchFailure(f"no in-flight invocation {invocation_id}")
        return entry

    async def runner_prepare(self, params: dict) -> InvocationPlan:
        spec = RunnerSpec.model_validate(params["spec"])
        runner = self.runners.get(spec.provider_name)
        async with self.supervisor.operation():
            plan = await runner.prepare(spec)
        self._invocations[plan.invocation_id] = _Invocation(runner=runner, plan=plan)
        return plan

    async def runner_launch(self, params: dict) -> RunnerHandle:
        entry = self._invocation(params["invocation_id"])
        async with self.supervisor.operation():
            entry.handle = await entry.runner.launch(entry.plan)
        return entry.handle

    async def runner_collect(self, params: dict) -> dict:
        entry = self._invocation(params["invocation_id"])
        if entry.handle is None:
            raise LaunchFailure(f"invocation {params['invocation_id']} was never launched")
        try:
            async with self.supervisor.operation():
                output = await entry.runner.collect(entry.handle)
        finally:
            self._invocations.pop(params["invocation_id"], None)
        return {"output": output, "state": entry.handle.state.value}

    async def runner_cancel(self, params: dict) -> dict:
        entry = self._invocations.get(params["invocation_id"])
        if entry is not None and entry.handle is not None:
            async with self.supervisor.operation(gated=False):
                await entry.runner.cancel(entry.handle)
        return {"cancelled": entry is not None}

    # --- trial.* ---

    async def trial_spawn(self, params: dict) -> dict:
        async with self.supervisor.operation():
            return {"worker_id": await self.trials.spawn(params["image_id"])}

    async def trial_exec(self, params: dict) -> dict:
        task = TrialTask.model_validate(params["task"])
        async with self.supervisor.operation():
            transcript = await self.trials.exec(params["worker_id"], task, params["trial_index"], params["key"])
        return {"path": params["key"], "transcript": transcript}

    async def trial_teardown(self, params: dict) -> dict:
        async with self.supervisor.operation(gated=False):
            await self.trials.teardown(params["worker_id"])
        return {"worker_id": params["worker_id"]}

    # --- image.* ---

    async def image_build(self, params: dict) -> ImageRef:
        async with self.supervisor.lock:
            image = await asyncio.to_thread(self.builder.build, params["rev"])
            self.images.record(image)
        logger.info(f"built {image.image_id} from {image.built_from_rev[:12]}")
        return image

    async def image_tag(self, params: dict) -> dict:
        async with self.supervisor.lock:
            self.images.tag(params["image_id"], params["tag"])
        return {"image_id": params["image_id"], "tag": params["tag"]}

    async def image_lkg(self, params: dict) -> dict | None:
        lkg = self.images.last_known_good()
        return lkg.model_dump(mode="json") if lkg else None

    # --- autoscan.* ---

    async def autoscan_catch_up(self, params: dict) -> dict:
        report = await self.autoscan.catch_up(params.get("agents"))
        return report.model_dump()

    async def autoscan_flag(self, params: dict) -> dict:
        report = await self.autoscan.flag(params["session_id"])
        return report.model_dump()

    # --- lifecycle ---

    def startup(self) -> None:
        """Sweep stale trial workers and make sure a substrate is live."""
        self.trials.sweep()
        self.supervisor.ensure_initial()

    async def serve(self, socket_path: str = HOSTD_SOCKET) -> None:
        self.startup()
        server = RpcServer(self.handlers())
        try:
            await asyncio.gather(server.serve_forever(socket_path), self.supervisor.run_forever())
        finally:
            await server.close()


def build_daemon(store: StateStore | None = None, runtime: ContainerRuntime | None = None) -> HostDaemon:
    """Wire a daemon from environment configuration."""
    store = store or StateStore()
    runtime = runtime or get_runtime(RUNTIME)
    workspace = GitWorkspace(WORKSPACE_DIR)
    images = ImageRegistry(store)
    builder: ImageBuilder = DockerBuilder(workspace) if RUNTIME == "docker" else SimulatedBuilder(workspace)
    runners = RunnerPool(store, mode="direct")
    evaluator: ChunkEvaluator = (
        ScriptedChunkEvaluator.load(AUTOSCAN_SIDECAR) if AUTOSCAN_SIDECAR else RunnerChunkEvaluator(runners, WORKSPACE_DIR)
    )
    supervisor = SwapSupervisor(store, runtime, images, WebhookDispatcher())
    return HostDaemon(
        store=store,
        runtime=runtime,
        images=images,
        builder=builder,
        supervisor=supervisor,
        autoscan=AutoscanEngine(store, evaluator),
        runners=runners,
        trials=TrialHost(runtime, store),
    )


def main() -> None:
    logger.info("starting moss host-daemon")
    try:
        asyncio.run(build_daemon().serve())
    except KeyboardInterrupt:
        logger.info("host-daemon stopped")
