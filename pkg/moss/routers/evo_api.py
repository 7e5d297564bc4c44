from datetime import datetime

from fastapi import APIRouter, HTTPException, Request, status
from pydantic import BaseModel

from moss.core.models import Batch, BatchState, DepthName, EvolutionRun, RunPhase, get_depth_profile
from moss.errors import (
    AmbiguousApply,
    InvalidTransition,
    MossError,
    NoEligibleBatch,
    RunActive,
    RunAlreadyActive,
    RunNotActive,
    UnknownBatch,
    UnknownRun,
)
from moss.hostd.swap import SwapRequest
from moss.logger import get_logger
from moss.pipeline.orchestrator import Orchestrator, StatusReport

router = APIRouter(prefix="/evo")
logger = get_logger("evo_api")

NOT_FOUND_ERRORS = (UnknownRun, UnknownBatch)
CONFLICT_ERRORS = (RunAlreadyActive, NoEligibleBatch, RunNotActive, RunActive, AmbiguousApply, InvalidTransition)


def http_error(e: MossError) -> HTTPException:
    """Translate a domain error into an HTTP error carrying ``{code, message}``."""
    if isinstance(e, NOT_FOUND_ERRORS):
        code = status.HTTP_404_NOT_FOUND
    elif isinstance(e, CONFLICT_ERRORS):
        code = status.HTTP_409_CONFLICT
    else:
        code = status.HTTP_422_UNPROCESSABLE_ENTITY
    return HTTPException(status_code=code, detail=e.as_detail())


def get_orchestrator(request: Request) -> Orchestrator:
    orchestrator: Orchestrator | None = request.state.orchestrator
    if orchestrator is None:
        raise HTTPException(status_code=status.HTTP_503_SERVICE_UNAVAILABLE, detail="evolution service not ready")
    return orchestrator


# Pydantic models for request/response
class StartRequest(BaseModel):
    batch_id: str | None = None
    depth: DepthName = DepthName.STANDARD


class RunRequest(BaseModel):
    run_id: str | None = None


class ApplyRequest(BaseModel):
    batch_id: str | None = None


class RunModel(BaseModel):
    run_id: str
    batch_id: str
    phase: RunPhase
    depth: DepthName
    restarted_from: str | None

    @classmethod
    def of(cls, run: EvolutionRun) -> "RunModel":
        return cls(
            run_id=run.run_id,
            batch_id=run.batch_id,
            phase=run.phase,
            depth=run.depth.name,
            restarted_from=run.restarted_from,
        )


class BatchSummary(BaseModel):
    batch_id: str
    conversation_id: str
    state: BatchState
    chunk_count: int
    task_ids: list[str]
    created_at: datetime
    sealed_at: datetime | None


@router.post("/start", response_model=RunModel, status_code=status.HTTP_201_CREATED)
async def start_run(request: Request, body: StartRequest):
    """Start an evolution run on the selected (or latest non-empty) batch."""
    orchestrator = get_orchestrator(request)
    try:
        run = orchestrator.start_run(body.batch_id, get_depth_profile(body.depth))
    except MossError as e:
        raise http_error(e) from e
    orchestrator.launch(run)
    return RunModel.of(run)


@router.post("/stop", response_model=StatusReport)
async def stop_run(request: Request, body: RunRequest):
    orchestrator = get_orchestrator(request)
    try:
        run = orchestrator.stop(body.run_id)
        return orchestrator.status(run.run_id)
    except MossError as e:
        raise http_error(e) from e


@router.post("/restart", response_model=RunModel, status_code=status.HTTP_201_CREATED)
async def restart_run(request: Request, body: RunRequest):
    """Start a fresh run on a stopped or failed run's batch."""
    orchestrator = get_orchestrator(request)
    try:
        run = orchestrator.restart(body.run_id)
    except MossError as e:
        raise http_error(e) from e
    orchestrator.launch(run)
    return RunModel.of(run)


@router.post("/apply", response_model=SwapRequest)
async def apply_candidate(request: Request, body: ApplyRequest):
    """Build the swap request for a ready batch.

    The gateway persists the returned request as the swap-request file; this
    endpoint never touches the live container.
    """
    orchestrator = get_orchestrator(request)
    try:
        swap_request = orchestrator.prepare_apply(body.batch_id)
    except MossError as e:
        raise http_error(e) from e
    logger.info(f"apply requested for batch {swap_request.batch_id}: {swap_request.candidate_image.image_id}")
    return swap_request


@router.get("/status", response_model=StatusReport)
async def get_status(request: Request, run_id: str | None = None):
    orchestrator = get_orchestrator(request)
    try:
        return orchestrator.status(run_id)
    except MossError as e:
        raise http_error(e) from e


@router.get("/batches", response_model=list[BatchSummary])
async def get_batches(request: Request):
    """All batches, oldest first."""
    orchestrator = get_orchestrator(request)
    return [
        BatchSummary(
            batch_id=b.batch_id,
            conversation_id=b.conversation_id,
            state=b.state,
            chunk_count=b.chunk_count,
            task_ids=b.task_ids(),
            created_at=b.created_at,
            sealed_at=b.sealed_at,
        )
        for b in orchestrator.batches.all()
    ]


@router.get("/batch/{batch_id}", response_model=Batch)
async def get_batch(batch_id: str, request: Request):
    orchestrator = get_orchestrator(request)
    try:
        return orchestrator.batches.get(batch_id)
    except MossError as e:
        raise http_error(e) from e
