import asyncio
import shutil
import textwrap
from pathlib import Path

import psutil
import pytest

from moss.core.models import StageName
from moss.errors import LaunchFailure, MalformedScript, UnknownProvider
from moss.runners import HandleState, RunnerPool, RunnerSpec, registry_get
from moss.runners.base import EMPTY_OUTPUT_EXIT_STATUS, TIMEOUT_EXIT_STATUS
from moss.runners.presets import PRESETS
from moss.runners.remote import RemoteRunner
from moss.runners.scripted import ScriptedRunner, parse_script
from moss.runners.subprocess_runner import SubprocessRunner, render_command
from tests.factories import entry

BODY = "The timezone is dropped in router.py before dispatch.\n"

requires_sh = pytest.mark.skipif(shutil.which("sh") is None, reason="needs a POSIX shell")


def stub_cli(
    directory: Path,
    *,
    body: str = BODY,
    exit_code: int = 0,
    sleep: float = 0,
    to_output: bool = True,
    spawn_child: bool = False,
) -> str:
    """Write a fake coding-agent CLI and return its command template."""
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "body.txt").write_text(body, encoding="utf-8")
    target = '> "$1"' if to_output else ""
    child = f'sleep 30 & echo $! > {directory}/child.pid' if spawn_child else ""
    script = directory / "stub.sh"
    script.write_text(
        textwrap.dedent(
            f"""\
            cat > /dev/null
            {child}
            sleep {sleep:g}
            cat {directory}/body.txt {target}
            exit {exit_code}
            """
        ),
        encoding="utf-8",
    )
    return f"sh {script} {{output_path}}"


def _gone(pid: int) -> bool:
    try:
        return psutil.Process(pid).status() == psutil.STATUS_ZOMBIE
    except psutil.NoSuchProcess:
        return True


def make_spec(workspace: Path, stage: StageName = StageName.LOCATE, timeout: float = 10.0, **kwargs) -> RunnerSpec:
    workspace.mkdir(parents=True, exist_ok=True)
    return RunnerSpec(
        provider_name="test",
        stage=stage,
        workspace_scope=str(workspace),
        prompt="Find where the timezone is lost.",
        timeout=timeout,
        **kwargs,
    )


@pytest.fixture(params=["scripted", "subprocess"])
def provider(request, store, tmp_path):
    """Build a runner of the parametrized kind that answers with BODY (after ``delay`` seconds)."""
    kind = request.param

    def build(delay: float = 0.0, exit_status: int = 0):
        if kind == "scripted":
            return ScriptedRunner(store, [entry("locate", BODY, delay=delay, exit_status=exit_status)])
        if shutil.which("sh") is None:
            pytest.skip("needs a POSIX shell")
        return SubprocessRunner(store, stub_cli(tmp_path / "cli", sleep=delay, exit_code=exit_status), name="stub")

    return build


class TestLifecycle:
    async def test_invoke_returns_body(self, provider, tmp_path):
        runner = provider()

        output = await runner.invoke(make_spec(tmp_path / "ws"))

        assert output.ok
        assert output.kind == StageName.LOCATE
        assert output.text == BODY

    async def test_prepare_stages_prompt_and_inputs(self, provider, tmp_path):
        artifact = tmp_path / "locate.md"
        artifact.write_text("earlier findings")
        runner = provider()

        plan = await runner.prepare(make_spec(tmp_path / "ws", inputs=[str(artifact), str(tmp_path / "missing.md")]))

        assert plan.prompt_path.read_text() == "Find where the timezone is lost."
        assert (Path(plan.invocation_dir) / "inputs" / "locate.md").read_text() == "earlier findings"
        manifest = (Path(plan.invocation_dir) / "inputs" / "manifest.json").read_text()
        assert "missing.md" not in manifest

    async def test_nonzero_exit_is_reported(self, provider, tmp_path):
        output = await provider(exit_status=3).invoke(make_spec(tmp_path / "ws"))

        assert output.exit_status == 3
        assert not output.ok

    async def test_timeout(self, provider, tmp_path):
        runner = provider(delay=5)
        plan = await runner.prepare(make_spec(tmp_path / "ws", timeout=0.3))
        handle = await runner.launch(plan)

        output = await runner.collect(handle)

        assert output.exit_status == TIMEOUT_EXIT_STATUS
        assert handle.state == HandleState.TIMED_OUT

    async def test_cancel_is_idempotent(self, provider, tmp_path):
        runner = provider(delay=5)
        handle = await runner.launch(await runner.prepare(make_spec(tmp_path / "ws")))

        await runner.cancel(handle)
        await runner.cancel(handle)

        assert handle.state == HandleState.CANCELLED
        with pytest.raises(LaunchFailure, match="cancelled"):
            await runner.collect(handle)

    async def test_cancel_during_collect(self, provider, tmp_path):
        runner = provider(delay=5)
        handle = await runner.launch(await runner.prepare(make_spec(tmp_path / "ws")))
        collect = asyncio.create_task(runner.collect(handle))
        await asyncio.sleep(0.2)

        await runner.cancel(handle)

        with pytest.raises(LaunchFailure):
            await asyncio.wait_for(collect, 5)

    async def test_cancel_after_finish_is_noop(self, provider, tmp_path):
        runner = provider()
        handle = await runner.launch(await runner.prepare(make_spec(tmp_path / "ws")))
        await runner.collect(handle)

        await runner.cancel(handle)

        assert handle.state == HandleState.FINISHED


@requires_sh
class TestSubprocessRunner:
    async def test_stdout_is_output_when_no_file_written(self, store, tmp_path):
        runner = SubprocessRunner(store, stub_cli(tmp_path / "cli", to_output=False))

        output = await runner.invoke(make_spec(tmp_path / "ws"))

        assert output.text == BODY

    async def test_empty_output_on_success(self, store, tmp_path):
        runner = SubprocessRunner(store, stub_cli(tmp_path / "cli", body=""))

        output = await runner.invoke(make_spec(tmp_path / "ws"))

        assert output.exit_status == EMPTY_OUTPUT_EXIT_STATUS
        assert output.body == b""

    async def test_missing_binary_is_launch_failure(self, store, tmp_path):
        runner = SubprocessRunner(store, "definitely-not-a-coding-agent {prompt_path}")

        with pytest.raises(LaunchFailure, match="failed to start"):
            await runner.invoke(make_spec(tmp_path / "ws"))

    async def test_cancel_leaves_no_orphans(self, store, tmp_path):
        cli = tmp_path / "cli"
        runner = SubprocessRunner(store, stub_cli(cli, sleep=30, spawn_child=True))
        handle = await runner.launch(await runner.prepare(make_spec(tmp_path / "ws")))
        for _ in range(50):
            if (cli / "child.pid").exists() and (cli / "child.pid").read_text().strip():
                break
            await asyncio.sleep(0.1)
        child_pid = int((cli / "child.pid").read_text())

        await runner.cancel(handle)

        for _ in range(30):
            if _gone(child_pid):
                break
            await asyncio.sleep(0.1)
        assert _gone(child_pid)

    def test_env_is_allowlisted(self, store, tmp_path, monkeypatch):
        monkeypatch.setenv("MOSS_TEST_ALLOWED", "1")
        monkeypatch.setenv("MOSS_TEST_SECRET", "2")
        runner = SubprocessRunner(store, "true")
        spec = make_spec(tmp_path / "ws", env_allowlist=["MOSS_TEST_ALLOWED"])

        plan = asyncio.run(runner.prepare(spec))
        env = runner._env(plan)

        assert env["MOSS_TEST_ALLOWED"] == "1"
        assert "MOSS_TEST_SECRET" not in env


class TestScriptedRunner:
    async def test_round_entries_are_served_to_their_round(self, store, tmp_path):
        runner = ScriptedRunner(
            store,
            [
                entry("plan_review", {"decision": "approve"}, round=2),
                entry("plan_review", {"decision": "reject_too_narrow"}),
            ],
        )

        first = await runner.invoke(make_spec(tmp_path / "ws", StageName.PLAN_REVIEW, round=1))
        second = await runner.invoke(make_spec(tmp_path / "ws", StageName.PLAN_REVIEW, round=2))

        assert b"reject_too_narrow" in first.body
        assert b"approve" in second.body
        assert runner.invocations == [(StageName.PLAN_REVIEW, 1), (StageName.PLAN_REVIEW, 2)]
        assert runner.remaining(StageName.PLAN_REVIEW) == 0

    async def test_exhausted_script(self, store, tmp_path):
        with pytest.raises(LaunchFailure, match="exhausted"):
            await ScriptedRunner(store, []).invoke(make_spec(tmp_path / "ws"))

    async def test_files_are_applied_on_collect(self, store, tmp_path):
        ws = tmp_path / "ws"
        (ws / "old.py").parent.mkdir(parents=True)
        (ws / "old.py").write_text("stale")
        runner = ScriptedRunner(
            store, [entry("implement", "done", files={"pkg/new.py": "x = 1\n", "old.py": None})]
        )

        await runner.invoke(make_spec(ws, StageName.IMPLEMENT))

        assert (ws / "pkg" / "new.py").read_text() == "x = 1\n"
        assert not (ws / "old.py").exists()

    def test_parse_script(self):
        entries = parse_script('[{"stage": "verdict", "body": {"verdict": "CONVERGED"}}]')

        assert entries[0].body_bytes == b'{\n  "verdict": "CONVERGED"\n}'
        with pytest.raises(MalformedScript, match="list"):
            parse_script('{"stage": "plan"}')
        with pytest.raises(MalformedScript, match="not valid JSON"):
            parse_script("[")
        with pytest.raises(MalformedScript, match="invalid script entry"):
            parse_script('[{"stage": "deploy", "body": "x"}]')


class TestRegistry:
    def test_scripted_variant_loads_script(self, store, tmp_path):
        script = tmp_path / "script.json"
        script.write_text('[{"stage": "locate", "body": "x"}]')

        runner = registry_get(f"scripted:{script}", store)

        assert isinstance(runner, ScriptedRunner)
        assert runner.remaining(StageName.LOCATE) == 1

    def test_preset_names_resolve_to_subprocess(self, store):
        runner = registry_get("codex", store)

        assert isinstance(runner, SubprocessRunner)
        assert runner.provider_name == "subprocess:codex"
        assert runner.command_template == PRESETS["codex"]

    def test_per_spawn_override_wins(self, store):
        assert registry_get("scripted", store, per_spawn_override="claude-code").provider_name == "subprocess:claude-code"

    def test_unknown_provider_lists_valid_names(self, store):
        with pytest.raises(UnknownProvider, match="Valid providers:.*codex"):
            registry_get("copilot", store)

    def test_subprocess_needs_a_template(self, store):
        with pytest.raises(UnknownProvider):
            registry_get("subprocess:nonexistent", store)

    def test_pool_applies_stage_overrides(self, store):
        pool = RunnerPool(store, default="scripted", stage_overrides={"implement": "codex"}, mode="direct")
        scripted = ScriptedRunner(store, [])
        pool.install("scripted", scripted)

        assert pool.for_stage(StageName.LOCATE) is scripted
        assert pool.for_stage(StageName.IMPLEMENT).provider_name == "subprocess:codex"
        assert pool.for_stage(StageName.IMPLEMENT) is pool.for_stage(StageName.IMPLEMENT)
        assert pool.resolve_name(StageName.LOCATE, per_spawn_override="opencode") == "opencode"

    def test_rpc_mode_needs_client(self, store):
        with pytest.raises(UnknownProvider, match="hostd client"):
            RunnerPool(store, default="scripted", stage_overrides={}, mode="rpc").get("scripted")

    def test_rpc_mode_builds_remote_runners(self, store):
        pool = RunnerPool(store, default="codex", stage_overrides={}, mode="rpc", rpc_client=object())

        runner = pool.for_stage(StageName.PLAN)

        assert isinstance(runner, RemoteRunner)
        assert runner.provider_name == "remote:codex"


def test_render_command_quotes_paths(store, tmp_path):
    spec = make_spec(tmp_path / "my workspace")
    plan = asyncio.run(ScriptedRunner(store, []).prepare(spec))

    argv = render_command(PRESETS["codex"], plan)

    assert argv[:3] == ["codex", "exec", "--full-auto"]
    assert argv[argv.index("--cd") + 1] == str(tmp_path / "my workspace")
    assert argv[argv.index("--output-last-message") + 1] == str(plan.output_path)
