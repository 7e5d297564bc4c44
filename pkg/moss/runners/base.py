import enum
import json
import shutil
from abc import ABC, abstractmethod
from datetime import datetime
from pathlib import Path

from pydantic import BaseModel, Field, field_validator, model_validator

from moss.core.models import StageName, new_id, utcnow
from moss.core.state_store import StateStore
from moss.logger import get_logger

logger = get_logger("runners")

# Exit status reported for a collect that hit the invocation timeout.
TIMEOUT_EXIT_STATUS = 124
# Exit status reported when a provider exits 0 without producing output.
EMPTY_OUTPUT_EXIT_STATUS = 65


class RunnerSpec(BaseModel):
    """One coding-agent invocation request."""

    provider_name: str
    stage: StageName
    workspace_scope: str
    prompt: str
    inputs: list[str] = []
    timeout: float
    env_allowlist: list[str] = []
    # Plan/code loop round, 1-based; None for single-shot stages.
    round: int | None = None

    @field_validator("timeout")
    @classmethod
    def _positive_timeout(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("timeout must be positive")
        return value

    @model_validator(mode="after")
    def _workspace_exists(self) -> "RunnerSpec":
        if not Path(self.workspace_scope).is_dir():
            raise ValueError(f"workspace_scope does not exist: {self.workspace_scope}")
        return self


class InvocationPlan(BaseModel):
    invocation_id: str
    spec: RunnerSpec
    invocation_dir: str

    @property
    def prompt_path(self) -> Path:
        return Path(self.invocation_dir) / "prompt.md"

    @property
    def output_path(self) -> Path:
        return Path(self.invocation_dir) / "output"

    @property
    def log_path(self) -> Path:
        return Path(self.invocation_dir) / "log"


class HandleState(enum.Enum):
    RUNNING = "running"
    FINISHED = "finished"
    CANCELLED = "cancelled"
    TIMED_OUT = "timed_out"


TERMINAL_STATES = {HandleState.FINISHED, HandleState.CANCELLED, HandleState.TIMED_OUT}


class RunnerHandle(BaseModel):
    invocation_id: str
    provider_name: str
    started_at: datetime = Field(default_factory=utcnow)
    state: HandleState = HandleState.RUNNING
    plan: InvocationPlan

    @property
    def is_terminal(self) -> bool:
        return self.state in TERMINAL_STATES

    def mark(self, to: HandleState) -> bool:
        """Move to ``to`` unless already terminal. Returns whether the state changed."""
        if self.is_terminal:
            return False
        self.state = to
        return True


class StageOutput(BaseModel):
    kind: StageName
    body: bytes
    exit_status: int
    log_path: str | None = None

    @model_validator(mode="after")
    def _body_on_success(self) -> "StageOutput":
        if self.exit_status == 0 and not self.body:
            raise ValueError("successful stage output must have a non-empty body")
        return self

    @property
    def ok(self) -> bool:
        return self.exit_status == 0

    @property
    def text(self) -> str:
        return self.body.decode("utf-8", errors="replace")


class Runner(ABC):
    """Four-method coding-agent interface: prepare, launch, collect, cancel.

    ``prepare`` is shared: it stages the prompt and an input manifest under
    ``invocations/<id>/`` in the state store. Providers implement the rest.
    """

    provider_name: str = ""

    def __init__(self, store: StateStore):
        self.store = store

    async def prepare(self, spec: RunnerSpec) -> InvocationPlan:
        invocation_id = new_id("inv")
        invocation_dir = self.store.path(f"invocations/{invocation_id}")
        inputs_dir = invocation_dir / "inputs"
        inputs_dir.mkdir(parents=True, exist_ok=True)

        plan = InvocationPlan(
            invocation_id=invocation_id,
            spec=spec,
            invocation_dir=str(invocation_dir),
        )
        plan.prompt_path.write_text(spec.prompt, encoding="utf-8")

        manifest = []
        for source in spec.inputs:
            src = Path(source)
            if src.is_file():
                shutil.copy2(src, inputs_dir / src.name)
                manifest.append({"name": src.name, "source": str(src)})
            else:
                logger.warning(f"[{invocation_id}] input artifact missing: {src}")
        (inputs_dir / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
        logger.info(f"[{invocation_id}] prepared {spec.stage.value} for {self.provider_name}")
        return plan

    @abstractmethod
    async def launch(self, plan: InvocationPlan) -> RunnerHandle: ...

    @abstractmethod
    async def collect(self, handle: RunnerHandle) -> StageOutput: ...

    @abstractmethod
    async def cancel(self, handle: RunnerHandle) -> None: ...

    async def invoke(self, spec: RunnerSpec) -> StageOutput:
        """prepare -> launch -> collect in one call."""
        plan = await self.prepare(spec)
        handle = await self.launch(plan)
        return await self.collect(handle)

    def _timed_out(self, handle: RunnerHandle) -> StageOutput:
        handle.mark(HandleState.TIMED_OUT)
        logger.warning(f"[{handle.invocation_id}] timed out after {handle.plan.spec.timeout}s")
        return StageOutput(
            kind=handle.plan.spec.stage,
            body=b"",
            exit_status=TIMEOUT_EXIT_STATUS,
            log_path=str(handle.plan.log_path),
        )
