"""Coding-agent runner registry.

Adding a provider means one new ``Runner`` subclass plus one entry in
``RUNNER_REGISTRY``. Provider names take the form ``<kind>`` or
``<kind>:<variant>``, e.g. ``scripted``, ``scripted:/path/script.json`` or
``subprocess:mock-cli``; bare preset names (``claude-code``, ``codex``, ...)
resolve to the subprocess runner with that preset.
"""

from collections.abc import Callable

from moss.config import DEFAULT_RUNNER, RUNNER_MODE, RUNNER_SCRIPT, load_config_file
from moss.core.models import StageName
from moss.core.state_store import StateStore
from moss.errors import UnknownProvider
from moss.hostd.rpc import RpcClient
from moss.runners.base import (
    HandleState,
    InvocationPlan,
    Runner,
    RunnerHandle,
    RunnerSpec,
    StageOutput,
)
from moss.runners.presets import get_preset, preset_names
from moss.runners.remote import RemoteRunner
from moss.runners.scripted import ScriptedRunner
from moss.runners.subprocess_runner import SubprocessRunner

RunnerFactory = Callable[[StateStore, str | None], Runner]


def _scripted_factory(store: StateStore, variant: str | None) -> Runner:
    script = variant or RUNNER_SCRIPT
    if not script:
        raise UnknownProvider("scripted runner needs a script path (MOSS_RUNNER_SCRIPT)")
    return ScriptedRunner.load(script, store)


def _subprocess_factory(store: StateStore, variant: str | None) -> Runner:
    template = get_preset(variant) if variant else None
    if template is None:
        raise UnknownProvider(f"no command template for subprocess provider {variant!r}")
    return SubprocessRunner(store, template, name=variant)


RUNNER_REGISTRY: dict[str, RunnerFactory] = {
    "scripted": _scripted_factory,
    "subprocess": _subprocess_factory,
}


def split_provider(provider_name: str) -> tuple[str, str | None]:
    kind, _, variant = provider_name.partition(":")
    if kind not in RUNNER_REGISTRY and kind in preset_names():
        return "subprocess", kind
    return kind, variant or None


def registry_get(
    provider_name: str,
    store: StateStore,
    per_spawn_override: str | None = None,
) -> Runner:
    """Build the runner for a spawn; a per-spawn override wins over the default.

    Raises:
        UnknownProvider: If the resolved name has no registry entry.

    """
    name = per_spawn_override or provider_name
    kind, variant = split_provider(name)
    factory = RUNNER_REGISTRY.get(kind)
    if factory is None:
        valid = ", ".join(sorted(set(RUNNER_REGISTRY) | set(preset_names())))
        raise UnknownProvider(f"unknown provider: {name}. Valid providers: {valid}")
    return factory(store, variant)


class RunnerPool:
    """Per-deployment runner cache with stage-level overrides.

    Instances are cached by provider name so a scripted runner's queues are
    shared across one run. In ``rpc`` mode every runner is a ``RemoteRunner``
    targeting the named provider on the host-daemon.
    """

    def __init__(
        self,
        store: StateStore,
        default: str = DEFAULT_RUNNER,
        stage_overrides: dict[str, str] | None = None,
        mode: str = RUNNER_MODE,
        rpc_client: RpcClient | None = None,
    ):
        self.store = store
        self.default = default
        if stage_overrides is None:
            stage_overrides = load_config_file().get("runner_overrides", {}) or {}
        self.stage_overrides = stage_overrides
        self.mode = mode
        self.rpc_client = rpc_client
        self._instances: dict[str, Runner] = {}

    def install(self, name: str, runner: Runner) -> None:
        self._instances[name] = runner

    def resolve_name(self, stage: StageName, per_spawn_override: str | None = None) -> str:
        return per_spawn_override or self.stage_overrides.get(stage.value) or self.default

    def get(self, provider_name: str) -> Runner:
        if provider_name not in self._instances:
            if self.mode == "rpc":
                if self.rpc_client is None:
                    raise UnknownProvider("rpc runner mode needs a hostd client")
                self._instances[provider_name] = RemoteRunner(self.store, self.rpc_client, provider_name)
            else:
                self._instances[provider_name] = registry_get(provider_name, self.store)
        return self._instances[provider_name]

    def for_stage(self, stage: StageName, per_spawn_override: str | None = None) -> Runner:
        return self.get(self.resolve_name(stage, per_spawn_override))


__all__ = [
    "RUNNER_REGISTRY",
    "HandleState",
    "InvocationPlan",
    "Runner",
    "RunnerHandle",
    "RunnerPool",
    "RunnerSpec",
    "StageOutput",
    "registry_get",
]
