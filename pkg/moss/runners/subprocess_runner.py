import asyncio
import os
import shlex

import aiofiles
import psutil

from moss.core.state_store import StateStore
from moss.errors import LaunchFailure
from moss.logger import get_logger
from moss.runners.base import (
    EMPTY_OUTPUT_EXIT_STATUS,
    HandleState,
    InvocationPlan,
    Runner,
    RunnerHandle,
    StageOutput,
)

logger = get_logger("runners.subprocess")

TERM_TIMEOUT = 2.0  # seconds
KILL_TIMEOUT = 1.0  # seconds
# Always passed through on top of RunnerSpec.env_allowlist.
BASE_ENV = ("PATH", "HOME", "LANG", "TMPDIR")


def render_command(template: str, plan: InvocationPlan) -> list[str]:
    """Fill ``{prompt_path}``, ``{workspace}`` and ``{output_path}`` into a command template."""
    command = template.format(
        prompt_path=shlex.quote(str(plan.prompt_path)),
        workspace=shlex.quote(plan.spec.workspace_scope),
        output_path=shlex.quote(str(plan.output_path)),
    )
    argv = shlex.split(command)
    if not argv:
        raise LaunchFailure("command template rendered to an empty command")
    return argv


class SubprocessRunner(Runner):
    """Host-side subprocess adapter for coding-agent CLIs.

    The provider receives the prompt on stdin and through ``{prompt_path}``.
    Its output is the ``{output_path}`` file when the provider wrote one,
    otherwise its stdout. Exit 0 with non-empty output is success.
    """

    provider_name = "subprocess"

    def __init__(self, store: StateStore, command_template: str, name: str | None = None):
        super().__init__(store)
        self.command_template = command_template
        if name:
            self.provider_name = f"subprocess:{name}"
        self._procs: dict[str, asyncio.subprocess.Process] = {}
        self._locks: dict[str, asyncio.Lock] = {}

    def _env(self, plan: InvocationPlan) -> dict[str, str]:
        names = set(BASE_ENV) | set(plan.spec.env_allowlist)
        return {k: os.environ[k] for k in names if k in os.environ}

    async def launch(self, plan: InvocationPlan) -> RunnerHandle:
        argv = render_command(self.command_template, plan)
        stdout_path = plan.output_path.with_name("stdout")
        try:
            with (
                open(plan.prompt_path, "rb") as stdin,
                open(stdout_path, "wb") as stdout,
                open(plan.log_path, "wb") as stderr,
            ):
                proc = await asyncio.create_subprocess_exec(
                    *argv,
                    stdin=stdin,
                    stdout=stdout,
                    stderr=stderr,
                    cwd=plan.spec.workspace_scope,
                    env=self._env(plan),
                    start_new_session=True,
                )
        except OSError as e:
            logger.error(f"[{plan.invocation_id}] failed to start {argv[0]}: {e}", exc_info=True)
            raise LaunchFailure(f"failed to start {argv[0]}: {e}") from e

        self._procs[plan.invocation_id] = proc
        self._locks[plan.invocation_id] = asyncio.Lock()
        logger.info(f"[{plan.invocation_id}] started PID={proc.pid} CMD='{shlex.join(argv)}'")
        return RunnerHandle(invocation_id=plan.invocation_id, provider_name=self.provider_name, plan=plan)

    async def collect(self, handle: RunnerHandle) -> StageOutput:
        if handle.state == HandleState.CANCELLED:
            raise LaunchFailure(f"invocation {handle.invocation_id} was cancelled")
        proc = self._procs[handle.invocation_id]
        try:
            exit_code = await asyncio.wait_for(proc.wait(), timeout=handle.plan.spec.timeout)
        except (TimeoutError, asyncio.TimeoutError):
            await self._terminate(handle)
            return self._timed_out(handle)

        if handle.state == HandleState.CANCELLED:
            raise LaunchFailure(f"invocation {handle.invocation_id} was cancelled")

        body = await self._read_output(handle.plan)
        if exit_code == 0 and not body:
            logger.warning(f"[{handle.invocation_id}] exited 0 without output")
            exit_code = EMPTY_OUTPUT_EXIT_STATUS
        handle.mark(HandleState.FINISHED)
        self._procs.pop(handle.invocation_id, None)
        logger.info(f"[{handle.invocation_id}] finished exit={exit_code} bytes={len(body)}")
        return StageOutput(
            kind=handle.plan.spec.stage,
            body=body,
            exit_status=exit_code,
            log_path=str(handle.plan.log_path),
        )

    async def cancel(self, handle: RunnerHandle) -> None:
        if not handle.mark(HandleState.CANCELLED):
            return
        await self._terminate(handle)
        handle.plan.output_path.unlink(missing_ok=True)
        logger.info(f"[{handle.invocation_id}] cancelled")

    async def _read_output(self, plan: InvocationPlan) -> bytes:
        for path in (plan.output_path, plan.output_path.with_name("stdout")):
            if path.exists():
                async with aiofiles.open(path, "rb") as f:
                    data = await f.read()
                if data.strip():
                    return data
        return b""

    async def _terminate(self, handle: RunnerHandle) -> None:
        """SIGTERM the process tree, escalate to SIGKILL, and reap."""
        proc = self._procs.pop(handle.invocation_id, None)
        lock = self._locks.pop(handle.invocation_id, None) or asyncio.Lock()
        if proc is None:
            return
        async with lock:
            if proc.returncode is not None:
                return
            children = await asyncio.to_thread(_descendants, proc.pid)
            for child in children:
                try:
                    child.terminate()
                except psutil.NoSuchProcess:
                    pass
            proc.terminate()
            try:
                await asyncio.wait_for(proc.wait(), timeout=TERM_TIMEOUT)
            except (TimeoutError, asyncio.TimeoutError):
                logger.info(f"[{handle.invocation_id}] PID {proc.pid} ignored SIGTERM, sending SIGKILL")
                proc.kill()
                try:
                    await asyncio.wait_for(proc.wait(), timeout=KILL_TIMEOUT)
                except (TimeoutError, asyncio.TimeoutError):
                    logger.warning(f"[{handle.invocation_id}] PID {proc.pid} not reaped after SIGKILL")
            _, alive = await asyncio.to_thread(psutil.wait_procs, children, KILL_TIMEOUT)
            for child in alive:
                try:
                    child.kill()
                except psutil.NoSuchProcess:
                    pass


def _descendants(pid: int) -> list[psutil.Process]:
    try:
        return psutil.Process(pid).children(recursive=True)
    except psutil.NoSuchProcess:
        return []
