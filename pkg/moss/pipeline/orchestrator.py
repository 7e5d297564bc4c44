"""Evolution run orchestration.

One run evolves one sealed batch: a baseline Task-Evaluate over the captured
transcripts locks the keypoint set, then each iteration walks

    locate -> plan/plan_review loop -> implement/code_review loop
           -> build -> trials -> task_evaluate -> verdict

until the verdict ends the run or the iteration budget runs out. Only one run
is active per deployment. Stop requests are persisted on the run and honored
at the next stage boundary.

Iteration artifacts live under ``runs/<run_id>/iter-<k>/``. Looping stages
keep one artifact per round (``plan.r2.md``) plus the latest under the
canonical name (``plan.md``).
"""

import asyncio
import json
import shutil
from collections.abc import Callable
from dataclasses import dataclass
from typing import TypeVar

from pydantic import BaseModel

from moss.config import Timings, get_timings
from moss.core.models import (
    Batch,
    BatchState,
    DepthProfile,
    EvolutionRun,
    ImageRef,
    IterationRecord,
    KeypointMatrix,
    RunPhase,
    StageName,
    Verdict,
    VerdictKind,
    get_depth_profile,
    utcnow,
)
from moss.core.state_store import BatchRepository, RunRepository, StateStore
from moss.errors import (
    AmbiguousApply,
    BudgetExhausted,
    ImplementNoCommit,
    InvalidTransition,
    MossError,
    NoEligibleBatch,
    RunActive,
    RunAlreadyActive,
    RunNotActive,
    RunStopped,
    StageOutputInvalid,
    UnknownRun,
)
from moss.hostd.swap import SwapRequest
from moss.logger import get_logger
from moss.pipeline.host_ops import HostOps
from moss.pipeline.stages import (
    GateDecision,
    GateReview,
    evidence_context,
    matrix_json,
    parse_gate,
    parse_matrix,
    render_stage_prompt,
    require_text,
)
from moss.pipeline.verdicts import validate_verdict
from moss.pipeline.workspace import GitWorkspace
from moss.runners import Runner, RunnerHandle, RunnerPool, RunnerSpec, StageOutput
from moss.trials.workers import TrialPlan, TrialTask, TrialTranscript, run_trials
from moss.webhooks import WebhookDispatcher, WebhookEvent

logger = get_logger("pipeline")

T = TypeVar("T")

# Re-invocations allowed after an invalid stage output.
STAGE_OUTPUT_RETRIES = 1

FAILED_PHASE_BY_VERDICT = {
    VerdictKind.FUNDAMENTAL_LIMIT_MODEL: RunPhase.FAILED_MODEL_LIMIT,
    VerdictKind.FUNDAMENTAL_LIMIT_ARCHITECTURE: RunPhase.FAILED_ARCHITECTURE_LIMIT,
}


@dataclass
class _InFlight:
    """The runner invocation a run is currently waiting on."""

    runner: Runner
    handle: RunnerHandle
    stopped: bool = False


class StatusReport(BaseModel):
    run_id: str
    batch_id: str
    phase: RunPhase
    depth: str
    iteration: int | None
    current_stage: str | None
    matrix_summary: dict[str, dict[str, int]] | None
    verdict_history: list[Verdict]
    candidate_image: ImageRef | None
    peak_iteration: int | None
    stop_requested: bool
    failure_reason: str | None
    restarted_from: str | None


class Orchestrator:
    def __init__(
        self,
        store: StateStore,
        runners: RunnerPool,
        workspace: GitWorkspace,
        host: HostOps,
        webhooks: WebhookDispatcher,
        timings: Timings | None = None,
    ):
        self.store = store
        self.batches = BatchRepository(store)
        self.runs = RunRepository(store)
        self.runners = runners
        self.workspace = workspace
        self.host = host
        self.webhooks = webhooks
        self.timings = timings or get_timings()
        self._tasks: dict[str, asyncio.Task] = {}
        self._in_flight: _InFlight | None = None
        self._cancellations: set[asyncio.Task] = set()

    # --- lifecycle controls ---

    def start_run(self, batch_id: str | None = None, depth: str | DepthProfile = "standard") -> EvolutionRun:
        """Select and claim a batch, creating a run in the baseline phase.

        Raises:
            RunAlreadyActive: If another run is active.
            NoEligibleBatch: If no batch with chunks can be evolved.
            UnknownBatch: If ``batch_id`` names no batch.

        """
        active = self.runs.active()
        if active is not None:
            raise RunAlreadyActive(f"run {active.run_id} is {active.phase.value}")
        profile = depth if isinstance(depth, DepthProfile) else get_depth_profile(depth)
        selected = self._select_batch(batch_id)
        # Autoscan may be appending to an open batch from the host-daemon.
        with self.batches.lock(selected.conversation_id):
            batch = self._check_eligible(self.batches.get(selected.batch_id))
            if batch.state == BatchState.OPEN:
                self.batches.seal(batch)
            batch.transition(BatchState.EVOLVING)
            self.batches.save(batch)

        run = EvolutionRun(batch_id=batch.batch_id, depth=profile)
        self.runs.save(run)
        logger.info(f"run {run.run_id} started on batch {batch.batch_id} ({batch.chunk_count} chunks, {profile.name.value})")
        return run

    @staticmethod
    def _check_eligible(batch: Batch) -> Batch:
        if not batch.chunks:
            raise NoEligibleBatch(f"batch {batch.batch_id} is empty")
        if batch.state not in (BatchState.OPEN, BatchState.SEALED, BatchState.FAILED):
            raise NoEligibleBatch(f"batch {batch.batch_id} is {batch.state.value}")
        return batch

    def _select_batch(self, batch_id: str | None) -> Batch:
        if batch_id is not None:
            return self._check_eligible(self.batches.get(batch_id))
        candidates = [
            b for b in self.batches.all() if b.chunks and b.state in (BatchState.OPEN, BatchState.SEALED)
        ]
        if not candidates:
            raise NoEligibleBatch("no non-empty open or sealed batch")
        return candidates[-1]

    def launch(self, run: EvolutionRun) -> asyncio.Task:
        """Drive ``run`` in a background task."""
        task = asyncio.create_task(self.execute(run.run_id), name=f"run-{run.run_id}")
        self._tasks[run.run_id] = task
        task.add_done_callback(lambda _: self._tasks.pop(run.run_id, None))
        return task

    async def close(self) -> None:
        """Cancel background run tasks; their runs stay active and resume on the next ``recover``."""
        tasks = list(self._tasks.values())
        for task in tasks:
            task.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)

    def stop(self, run_id: str | None = None) -> EvolutionRun:
        run = self._resolve(run_id, active_default=True)
        if not run.is_active:
            raise RunNotActive(f"run {run.run_id} is {run.phase.value}")
        run.stop_requested = True
        self.runs.save(run)
        logger.info(f"stop requested for run {run.run_id}")
        if run.run_id not in self._tasks:
            self._mark_stopped(run)
        elif self._in_flight is not None:
            self._cancel_in_flight(self._in_flight)
        return run

    def _cancel_in_flight(self, in_flight: _InFlight) -> None:
        in_flight.stopped = True
        task = asyncio.get_running_loop().create_task(self._cancel(in_flight))
        self._cancellations.add(task)
        task.add_done_callback(self._cancellations.discard)

    async def _cancel(self, in_flight: _InFlight) -> None:
        try:
            await in_flight.runner.cancel(in_flight.handle)
        except MossError as e:
            logger.warning(f"[{in_flight.handle.invocation_id}] cancel on stop failed: {e.message}")

    def restart(self, run_id: str | None = None) -> EvolutionRun:
        """Begin a fresh run on a stopped or failed run's batch, reusing its baseline."""
        old = self._resolve(run_id, active_default=False)
        if old.is_active:
            raise RunActive(f"run {old.run_id} is still {old.phase.value}")
        if old.phase == RunPhase.CONVERGED:
            raise InvalidTransition(f"run {old.run_id} converged; apply it instead")
        active = self.runs.active()
        if active is not None:
            raise RunAlreadyActive(f"run {active.run_id} is {active.phase.value}")

        batch = self.batches.get(old.batch_id)
        with self.batches.lock(batch.conversation_id):
            batch = self.batches.get(old.batch_id)
            batch.transition(BatchState.EVOLVING)
            self.batches.save(batch)
        run = EvolutionRun(batch_id=old.batch_id, depth=old.depth, restarted_from=old.run_id)
        if old.baseline_matrix is not None:
            run.baseline_matrix = old.baseline_matrix
            run.phase = RunPhase.ITERATING
            self.store.write_model(f"runs/{run.run_id}/baseline/matrix.json", old.baseline_matrix)
        self.runs.save(run)
        logger.info(f"run {run.run_id} restarts {old.run_id} on batch {old.batch_id}")
        return run

    def status(self, run_id: str | None = None) -> StatusReport:
        run = self._resolve(run_id, active_default=False)
        current = run.iterations[-1] if run.iterations else None
        latest_matrix = next((it.matrix for it in reversed(run.iterations) if it.matrix), run.baseline_matrix)
        return StatusReport(
            run_id=run.run_id,
            batch_id=run.batch_id,
            phase=run.phase,
            depth=run.depth.name.value,
            iteration=current.index if current else None,
            current_stage=run.current_stage,
            matrix_summary=latest_matrix.summary() if latest_matrix else None,
            verdict_history=run.verdict_history(),
            candidate_image=run.candidate_image,
            peak_iteration=run.peak_iteration,
            stop_requested=run.stop_requested,
            failure_reason=run.failure_reason,
            restarted_from=run.restarted_from,
        )

    def prepare_apply(self, batch_id: str | None = None) -> SwapRequest:
        """Build the swap request for a ready batch; the caller publishes it.

        Raises:
            NoEligibleBatch: If no (or the named) batch is not ready to apply.
            AmbiguousApply: If several batches are ready and none is named.

        """
        ready = self.batches.ready_to_apply()
        if batch_id is None:
            if not ready:
                raise NoEligibleBatch("no batch is ready to apply")
            if len(ready) > 1:
                ids = [b.batch_id for b in ready]
                raise AmbiguousApply(f"{len(ids)} batches are ready to apply; name one", ids)
            batch = ready[0]
        else:
            batch = self.batches.get(batch_id)
            if batch.state != BatchState.READY_TO_APPLY:
                raise NoEligibleBatch(f"batch {batch_id} is {batch.state.value}")
        run = self.runs.latest_for_batch(batch.batch_id)
        if run is None or run.phase != RunPhase.CONVERGED or run.candidate_image is None:
            raise NoEligibleBatch(f"batch {batch.batch_id} has no converged run")
        return SwapRequest(candidate_image=run.candidate_image, batch_id=batch.batch_id, run_id=run.run_id)

    def _resolve(self, run_id: str | None, active_default: bool) -> EvolutionRun:
        if run_id is not None:
            return self.runs.get(run_id)
        run = (self.runs.active() if active_default else None) or self.runs.latest()
        if run is None:
            raise UnknownRun("no runs yet")
        return run

    # --- recovery ---

    def recover(self) -> EvolutionRun | None:
        """Prepare an interrupted active run for re-execution.

        A partially executed iteration is discarded: its directory is cleared
        and the workspace reset to the revision it started from.
        """
        run = self.runs.active()
        if run is None:
            return None
        if run.stop_requested:
            self._mark_stopped(run)
            return None
        if run.phase == RunPhase.BASELINE:
            shutil.rmtree(self.store.path(f"runs/{run.run_id}/baseline"), ignore_errors=True)
        elif run.iterations and run.iterations[-1].verdict is None:
            partial = run.iterations.pop()
            shutil.rmtree(self.store.path(self._iter_key(run, partial.index)), ignore_errors=True)
            if partial.start_rev:
                self.workspace.reset_hard(partial.start_rev)
            logger.warning(f"run {run.run_id}: discarded partial iteration {partial.index}; re-executing")
        run.current_stage = None
        self._save(run)
        return run

    # --- execution ---

    async def execute(self, run_id: str) -> EvolutionRun:
        """Drive a run until it converges, fails or is stopped."""
        run = self.runs.get(run_id)
        try:
            while run.is_active:
                if run.phase == RunPhase.BASELINE:
                    await self.run_baseline(run)
                    continue
                last = run.iterations[-1] if run.iterations else None
                if last is not None and last.verdict is not None and self._concludes(run, last.verdict):
                    await self.finalize(run, last.verdict)
                    break
                await self.run_iteration(run)
        except RunStopped:
            self._mark_stopped(run)
        except MossError as e:
            logger.error(f"run {run.run_id} failed at {run.current_stage}: {e.code}: {e.message}")
            await self._fail(run, RunPhase.FAILED, f"{e.code}: {e.message}")
        except Exception as e:
            logger.error(f"run {run.run_id} crashed", exc_info=True)
            await self._fail(run, RunPhase.FAILED, f"internal_error: {e}")
        return run

    def _concludes(self, run: EvolutionRun, verdict: Verdict) -> bool:
        return verdict.kind != VerdictKind.NEED_MORE_WORK or len(run.iterations) >= run.depth.max_iterations

    async def run_baseline(self, run: EvolutionRun) -> KeypointMatrix:
        """Score the batch's captured transcripts and lock the keypoint set."""
        batch = self.batches.get(run.batch_id)
        self._boundary(run, StageName.TASK_EVALUATE)
        prompt = render_stage_prompt(StageName.TASK_EVALUATE, tasks=evidence_context(batch), locked=None, trials=None)
        matrix = await self._invoke_parsed(
            StageName.TASK_EVALUATE,
            prompt,
            lambda output: parse_matrix(output, batch.task_ids()),
        )
        self.store.write_model(f"runs/{run.run_id}/baseline/matrix.json", matrix)
        run.baseline_matrix = matrix
        run.phase = RunPhase.ITERATING
        run.current_stage = None
        self._save(run)
        logger.info(f"run {run.run_id}: baseline locked {len(matrix.keys())} keypoints over {len(matrix.tasks)} tasks")
        return matrix

    async def run_iteration(self, run: EvolutionRun) -> IterationRecord:
        index = len(run.iterations) + 1
        if index > run.depth.max_iterations:
            raise BudgetExhausted(f"iteration budget of {run.depth.max_iterations} spent")
        batch = self.batches.get(run.batch_id)
        record = IterationRecord(index=index, start_rev=self.workspace.current_rev())
        run.iterations.append(record)
        self._save(run)
        key = self._iter_key(run, index)
        logger.info(f"run {run.run_id}: iteration {index} from {record.start_rev[:12]}")

        previous = run.verdict_history()[-1] if run.verdict_history() else None
        latest_matrix = next((it.matrix for it in reversed(run.iterations) if it.matrix), run.baseline_matrix)

        self._boundary(run, StageName.LOCATE)
        prompt = render_stage_prompt(
            StageName.LOCATE,
            workspace=self.workspace.path,
            tasks=evidence_context(batch),
            matrix_json=matrix_json(latest_matrix),
            previous_verdict=previous.model_dump(mode="json") if previous else None,
        )
        locate = await self._invoke_parsed(StageName.LOCATE, prompt, require_text)
        self._artifact(record, StageName.LOCATE, f"{key}/locate.md", locate)

        plan = await self.plan_loop(run, record, locate)
        record.commit_rev = await self.code_loop(run, record, plan)
        self._save(run)

        self._boundary(run, "build")
        record.image = await self.host.build(record.commit_rev)
        self._save(run)

        self._boundary(run, "trials")
        transcripts = await run_trials(
            TrialPlan(
                image=record.image,
                tasks=[TrialTask(task_id=t["task_id"], prompt=t["prompt"]) for t in evidence_context(batch)],
                trials_per_task=run.depth.trials_per_task,
                workers_n=run.depth.trial_workers_n,
            ),
            self.host.trial_backend(),
            self.store,
            prefix=f"{key}/trials",
        )
        record.stage_artifacts["trials"] = f"{key}/trials/index.json"
        self._save(run)

        record.matrix = await self._evaluate_trials(run, batch, transcripts)
        self.store.write_model(f"{key}/matrix.json", record.matrix)
        record.stage_artifacts[StageName.TASK_EVALUATE.value] = f"{key}/matrix.json"
        self._save(run)

        self._boundary(run, StageName.VERDICT)
        history = [("baseline", matrix_json(run.baseline_matrix))]
        history += [(f"iteration {it.index}", matrix_json(it.matrix)) for it in run.iterations if it.matrix]
        prompt = render_stage_prompt(
            StageName.VERDICT,
            iteration=index,
            max_iterations=run.depth.max_iterations,
            history=history,
        )
        verdict = await self._invoke_parsed(StageName.VERDICT, prompt, lambda output: validate_verdict(output, run))
        if verdict.kind == VerdictKind.CONVERGED and not verdict.forced_by_plateau:
            run.peak_iteration = index
            run.candidate_image = record.image
        record.verdict = verdict
        self.store.write_model(f"{key}/verdict.json", verdict)
        record.stage_artifacts[StageName.VERDICT.value] = f"{key}/verdict.json"
        run.current_stage = None
        self._save(run)
        logger.info(f"run {run.run_id}: iteration {index} verdict {verdict.kind.value} (score {record.matrix.score_sum()})")
        return record

    async def _evaluate_trials(
        self, run: EvolutionRun, batch: Batch, transcripts: list[TrialTranscript]
    ) -> KeypointMatrix:
        self._boundary(run, StageName.TASK_EVALUATE)
        assert run.baseline_matrix is not None
        prompt = render_stage_prompt(
            StageName.TASK_EVALUATE,
            locked=matrix_json(run.baseline_matrix),
            trials=[t.model_dump(mode="json") for t in transcripts],
            tasks=evidence_context(batch),
        )
        return await self._invoke_parsed(
            StageName.TASK_EVALUATE,
            prompt,
            lambda output: parse_matrix(output, batch.task_ids(), locked=run.baseline_matrix),
        )

    async def plan_loop(self, run: EvolutionRun, record: IterationRecord, locate: str) -> str:
        """Alternate plan and plan_review until approval or the round budget.

        Raises:
            BudgetExhausted: If every round's review rejects.

        """
        key = self._iter_key(run, record.index)
        rounds = run.depth.plan_rounds
        review: GateReview | None = None
        for round_ in range(1, rounds + 1):
            self._boundary(run, StageName.PLAN)
            prompt = render_stage_prompt(
                StageName.PLAN,
                workspace=self.workspace.path,
                locate=locate,
                review=review.model_dump(mode="json") if review else None,
                round=round_,
                rounds=rounds,
            )
            plan = await self._invoke_parsed(StageName.PLAN, prompt, require_text, round_=round_)
            self._artifact(record, StageName.PLAN, f"{key}/plan.md", plan, round_)

            self._boundary(run, StageName.PLAN_REVIEW)
            prompt = render_stage_prompt(StageName.PLAN_REVIEW, locate=locate, plan=plan, round=round_, rounds=rounds)
            review = await self._invoke_parsed(StageName.PLAN_REVIEW, prompt, parse_gate, round_=round_)
            self._artifact(record, StageName.PLAN_REVIEW, f"{key}/plan_review.json", _review_json(review), round_)
            logger.info(f"run {run.run_id}: plan round {round_}: {review.decision.value}")
            if review.approved:
                return plan
        raise BudgetExhausted(f"plan_review rejected all {rounds} rounds")

    async def code_loop(self, run: EvolutionRun, record: IterationRecord, plan: str) -> str:
        """Implement and review against a fixed start revision; rejected rounds are hard-reset away.

        Raises:
            BudgetExhausted: If every round is rejected; the workspace is left at the start revision.

        """
        key = self._iter_key(run, record.index)
        rounds = run.depth.code_rounds
        r0 = self.workspace.current_rev()
        if self.workspace.is_dirty():
            self.workspace.reset_hard(r0)
        review: GateReview | None = None
        for round_ in range(1, rounds + 1):
            self._boundary(run, StageName.IMPLEMENT)
            prompt = render_stage_prompt(
                StageName.IMPLEMENT,
                workspace=self.workspace.path,
                plan=plan,
                review=review.model_dump(mode="json") if review else None,
                round=round_,
                rounds=rounds,
            )
            summary = await self._invoke_parsed(StageName.IMPLEMENT, prompt, require_text, round_=round_)
            self.store.write(f"{key}/implement.r{round_}.md", summary.encode("utf-8"))
            try:
                head = self._single_commit(r0, f"moss {run.run_id} iteration {record.index} round {round_}")
            except ImplementNoCommit as e:
                logger.warning(f"run {run.run_id}: code round {round_}: {e.message}")
                review = GateReview(decision=GateDecision.REJECT, notes=e.message)
                self._artifact(record, StageName.CODE_REVIEW, f"{key}/code_review.json", _review_json(review), round_)
                continue
            diff = self.workspace.diff(r0, head)
            self._artifact(record, StageName.IMPLEMENT, f"{key}/diff.patch", diff, round_)

            self._boundary(run, StageName.CODE_REVIEW)
            prompt = render_stage_prompt(StageName.CODE_REVIEW, plan=plan, diff=diff, round=round_, rounds=rounds)
            review = await self._invoke_parsed(StageName.CODE_REVIEW, prompt, parse_gate, round_=round_)
            self._artifact(record, StageName.CODE_REVIEW, f"{key}/code_review.json", _review_json(review), round_)
            logger.info(f"run {run.run_id}: code round {round_}: {review.decision.value}")
            if review.approved:
                return head
            self.workspace.reset_hard(r0)
        self.workspace.reset_hard(r0)
        raise BudgetExhausted(f"code_review rejected all {rounds} rounds")

    def _single_commit(self, r0: str, message: str) -> str:
        """Make the implement stage's work exactly one commit on top of ``r0``."""
        commits = self.workspace.commits_since(r0)
        dirty = self.workspace.is_dirty()
        if not commits and not dirty:
            raise ImplementNoCommit("implement stage changed nothing")
        if len(commits) == 1 and not dirty:
            return commits[0]
        return self.workspace.squash_onto(r0, message)

    async def finalize(self, run: EvolutionRun, verdict: Verdict) -> None:
        batch = self.batches.get(run.batch_id)
        if verdict.kind == VerdictKind.CONVERGED:
            if verdict.forced_by_plateau and run.peak_iteration is not None:
                peak = run.iteration(run.peak_iteration)
                if peak.commit_rev:
                    self.workspace.reset_hard(peak.commit_rev)
            run.phase = RunPhase.CONVERGED
            run.current_stage = None
            batch.transition(BatchState.READY_TO_APPLY)
            self.batches.save(batch)
            self._save(run)
            assert run.candidate_image is not None
            logger.info(f"run {run.run_id} converged; candidate {run.candidate_image.image_id} awaits apply")
            await self.webhooks.fire(
                WebhookEvent.EVOLUTION_CONVERGED,
                status="converged",
                run_id=run.run_id,
                batch_id=run.batch_id,
                detail={
                    "candidate_image": run.candidate_image.image_id,
                    "peak_iteration": run.peak_iteration,
                    "forced_by_plateau": verdict.forced_by_plateau,
                    "iterations": len(run.iterations),
                },
                delivery_id=f"{run.run_id}:converged",
            )
            return
        if verdict.kind in FAILED_PHASE_BY_VERDICT:
            await self._fail(run, FAILED_PHASE_BY_VERDICT[verdict.kind], verdict.rationale or verdict.kind.value)
            return
        await self._fail(run, RunPhase.FAILED, f"max_iterations ({run.depth.max_iterations}) reached without convergence")

    async def _fail(self, run: EvolutionRun, phase: RunPhase, reason: str) -> None:
        try:
            self._discard_partial_iteration(run)
        except MossError as e:
            logger.error(f"run {run.run_id}: cannot reset workspace: {e.message}")
        run.phase = phase
        run.failure_reason = reason
        run.current_stage = None
        self._save(run)
        try:
            batch = self.batches.get(run.batch_id)
            if batch.state == BatchState.EVOLVING:
                batch.transition(BatchState.FAILED)
                self.batches.save(batch)
        except MossError as e:
            logger.error(f"run {run.run_id}: cannot mark batch failed: {e.message}")
        await self.webhooks.fire(
            WebhookEvent.EVOLUTION_FAILED,
            status=phase.value,
            run_id=run.run_id,
            batch_id=run.batch_id,
            detail={"reason": reason, "iterations": len(run.iterations)},
            delivery_id=f"{run.run_id}:failed",
        )

    def _discard_partial_iteration(self, run: EvolutionRun) -> None:
        """Reset the workspace to where an iteration without a verdict started."""
        if run.iterations and run.iterations[-1].verdict is None and run.iterations[-1].start_rev:
            self.workspace.reset_hard(run.iterations[-1].start_rev)

    def _mark_stopped(self, run: EvolutionRun) -> None:
        self._discard_partial_iteration(run)
        run.phase = RunPhase.STOPPED
        run.current_stage = None
        self._save(run)
        batch = self.batches.get(run.batch_id)
        if batch.state == BatchState.EVOLVING:
            batch.transition(BatchState.SEALED)
            self.batches.save(batch)
        logger.info(f"run {run.run_id} stopped; batch {batch.batch_id} is sealed again")

    # --- helpers ---

    @staticmethod
    def _iter_key(run: EvolutionRun, index: int) -> str:
        return f"runs/{run.run_id}/iter-{index}"

    def _save(self, run: EvolutionRun) -> None:
        """Persist the run, never clearing a stop request written by ``stop``."""
        try:
            persisted = self.runs.get(run.run_id)
            run.stop_requested = run.stop_requested or persisted.stop_requested
        except UnknownRun:
            pass
        run.updated_at = utcnow()
        self.runs.save(run)

    def _boundary(self, run: EvolutionRun, stage: StageName | str) -> None:
        """Stage boundary: honor a pending stop, then record the stage about to run."""
        if self.runs.get(run.run_id).stop_requested:
            raise RunStopped(f"run {run.run_id} stopped before {stage}")
        run.current_stage = stage.value if isinstance(stage, StageName) else stage
        self._save(run)

    def _artifact(
        self, record: IterationRecord, stage: StageName, key: str, content: str, round_: int | None = None
    ) -> None:
        data = content.encode("utf-8")
        if round_ is not None:
            stem, _, ext = key.rpartition(".")
            self.store.write(f"{stem}.r{round_}.{ext}", data)
        self.store.write(key, data)
        record.stage_artifacts[stage.value] = key

    async def _invoke(self, stage: StageName, prompt: str, round_: int | None) -> StageOutput:
        runner = self.runners.for_stage(stage)
        spec = RunnerSpec(
            provider_name=runner.provider_name,
            stage=stage,
            workspace_scope=str(self.workspace.path),
            prompt=prompt,
            timeout=self.timings.runner_timeout,
            round=round_,
        )
        plan = await runner.prepare(spec)
        handle = await runner.launch(plan)
        in_flight = self._in_flight = _InFlight(runner, handle)
        try:
            output = await runner.collect(handle)
        except MossError:
            if in_flight.stopped:
                raise RunStopped(f"{stage.value} cancelled by a stop request") from None
            raise
        finally:
            self._in_flight = None
        if in_flight.stopped:
            raise RunStopped(f"{stage.value} cancelled by a stop request")
        return output

    async def _invoke_parsed(
        self,
        stage: StageName,
        prompt: str,
        parse: Callable[[StageOutput], T],
        round_: int | None = None,
    ) -> T:
        """Invoke a stage and validate its output, re-invoking once on an invalid output."""
        for attempt in range(STAGE_OUTPUT_RETRIES + 1):
            output = await self._invoke(stage, prompt, round_)
            try:
                return parse(output)
            except StageOutputInvalid as e:
                if attempt == STAGE_OUTPUT_RETRIES:
                    raise
                logger.warning(f"{stage.value} output invalid ({e.message}); re-invoking once")
        raise AssertionError("unreachable")


def _review_json(review: GateReview) -> str:
    return json.dumps(review.model_dump(mode="json"), indent=2, sort_keys=True)
