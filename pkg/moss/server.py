"""Evolution service: the FastAPI app behind the gateway's ``/evo/*`` endpoint group."""

from contextlib import asynccontextmanager
from pathlib import Path

import uvicorn
from fastapi import FastAPI

from moss.config import HOSTD_SOCKET, RUNNER_MODE, RUNTIME, STATE_DIR, WORKSPACE_DIR
from moss.core.state_store import StateStore
from moss.hostd.images import DockerBuilder, ImageBuilder, ImageRegistry, SimulatedBuilder
from moss.hostd.rpc import RpcClient
from moss.hostd.runtime import get_runtime
from moss.logger import get_logger
from moss.middleware import OrchestratorMiddleware
from moss.pipeline.host_ops import HostOps, LocalHostOps, RpcHostOps
from moss.pipeline.orchestrator import Orchestrator
from moss.pipeline.workspace import GitWorkspace
from moss.routers.evo_api import router as evo_router
from moss.runners import RunnerPool
from moss.trials.workers import TrialHost
from moss.webhooks import WebhookDispatcher

logger = get_logger("server")


def initialize_storage():
    """Initialize the state directory if it doesn't exist."""
    state_dir = Path(STATE_DIR)
    state_dir.mkdir(parents=True, exist_ok=True)
    logger.info(f"State directory: {state_dir}")


def build_orchestrator() -> Orchestrator:
    """Wire an orchestrator from environment configuration.

    In ``rpc`` runner mode the service runs inside the substrate container and
    delegates coding-agent invocations, builds and trials to the host-daemon.
    """
    store = StateStore()
    workspace = GitWorkspace(WORKSPACE_DIR)
    host: HostOps
    if RUNNER_MODE == "rpc":
        client = RpcClient(HOSTD_SOCKET)
        runners = RunnerPool(store, mode="rpc", rpc_client=client)
        host = RpcHostOps(client)
    else:
        runtime = get_runtime(RUNTIME)
        builder: ImageBuilder = DockerBuilder(workspace) if RUNTIME == "docker" else SimulatedBuilder(workspace)
        runners = RunnerPool(store)
        host = LocalHostOps(builder, ImageRegistry(store), TrialHost(runtime, store))
    return Orchestrator(store, runners, workspace, host, WebhookDispatcher())


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Build the orchestrator unless one was injected, and resume any interrupted run."""
    initialize_storage()
    if getattr(app.state, "orchestrator", None) is None:
        app.state.orchestrator = build_orchestrator()
    orchestrator: Orchestrator = app.state.orchestrator
    run = orchestrator.recover()
    if run is not None:
        logger.info(f"resuming run {run.run_id} at iteration {len(run.iterations) + 1}")
        orchestrator.launch(run)
    yield
    await orchestrator.close()


def create_app(orchestrator: Orchestrator | None = None) -> FastAPI:
    app = FastAPI(lifespan=lifespan)
    app.state.orchestrator = orchestrator

    app.include_router(evo_router, tags=["evo"])

    app.add_middleware(
        OrchestratorMiddleware,
        whitelisted_prefixes=["/evo"],
    )

    @app.get("/health")
    async def health():
        logger.info("Health check endpoint called")
        return {"status": "ok"}

    return app


app = create_app()


def main() -> None:
    uvicorn.run("moss.server:app", host="0.0.0.0", port=8090)
