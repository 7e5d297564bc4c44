"""Command templates for real coding-agent CLIs over the subprocess runner.

Each preset receives the prompt on stdin; ``{workspace}``, ``{prompt_path}``
and ``{output_path}`` are filled per invocation. These CLIs are not exercised
in tests; extra presets can be added under ``runner_presets`` in the YAML
config file.
"""

from moss.config import load_config_file

PRESETS: dict[str, str] = {
    "claude-code": "claude --print --permission-mode acceptEdits --add-dir {workspace}",
    "codex": "codex exec --full-auto --cd {workspace} --output-last-message {output_path} -",
    "deepseek-tui": "deepseek-tui --headless --workdir {workspace} --prompt-file {prompt_path} --output {output_path}",
    "opencode": "opencode run --cwd {workspace} --file {prompt_path}",
}


def get_preset(name: str) -> str | None:
    """Get the command template for a preset, YAML entries taking precedence."""
    configured = load_config_file().get("runner_presets", {}) or {}
    return configured.get(name) or PRESETS.get(name)


def preset_names() -> list[str]:
    configured = load_config_file().get("runner_presets", {}) or {}
    return sorted(set(PRESETS) | set(configured))
