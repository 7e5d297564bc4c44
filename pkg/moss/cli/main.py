"""``moss evo``: control an evolution deployment from the agent's shell.

Exit codes: 0 success, 1 domain error, 2 usage error, 3 transport failure.
"""

from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Any, Optional

import typer

from moss.cli.render import (
    render_apply,
    render_batch,
    render_batches,
    render_json,
    render_run,
    render_scan,
    render_status,
    render_stop,
)
from moss.cli.transport import CliConfig, GatewayClient, HostdClient
from moss.core.models import DepthName
from moss.errors import AmbiguousApply, MossError, TransportFailure

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_USAGE = 2
EXIT_TRANSPORT = 3


@dataclass
class CliContext:
    config: CliConfig = field(default_factory=CliConfig)
    gateway: GatewayClient | None = None
    hostd: Any = None

    def __post_init__(self) -> None:
        if self.gateway is None:
            self.gateway = GatewayClient(self.config.gateway_url)
        if self.hostd is None:
            self.hostd = HostdClient(self.config.hostd_socket)


app = typer.Typer(
    name="moss",
    help="Source-level self-evolution for the substrate's harness",
    add_completion=False,
    no_args_is_help=True,
)

evo_app = typer.Typer(
    help="Inspect and control evolution runs",
    no_args_is_help=True,
)
app.add_typer(evo_app, name="evo")

JsonOption = typer.Option(False, "--json", help="Emit the raw response document")


@app.callback()
def main_callback(ctx: typer.Context):
    """moss command-line interface."""
    if ctx.obj is None:
        ctx.obj = CliContext()


def _run(ctx: typer.Context, call: Callable[[CliContext], Any], render: Callable[[Any], str], json_output: bool):
    """Execute one transport call, print its rendering and map failures to exit codes."""
    try:
        result = call(ctx.obj)
    except TransportFailure as e:
        typer.echo(f"Error: transport failure: {e.message}", err=True)
        raise typer.Exit(EXIT_TRANSPORT) from e
    except AmbiguousApply as e:
        typer.echo(f"Error: {e.message}", err=True)
        for candidate in e.candidates:
            typer.echo(f"  {candidate}", err=True)
        raise typer.Exit(EXIT_DOMAIN) from e
    except MossError as e:
        typer.echo(f"Error: {e.code}: {e.message}", err=True)
        raise typer.Exit(EXIT_DOMAIN) from e
    typer.echo(render_json(result) if json_output else render(result))


# --- HTTP subcommands ---


@evo_app.command()
def status(
    ctx: typer.Context,
    run_id: Optional[str] = typer.Option(None, "--run", help="Run id (default: active or latest run)"),
    json_output: bool = JsonOption,
):
    """Show the phase, stage, matrix and verdicts of a run."""
    _run(ctx, lambda c: c.gateway.get("/evo/status", run_id=run_id), render_status, json_output)


@evo_app.command()
def batches(ctx: typer.Context, json_output: bool = JsonOption):
    """List evidence batches."""
    _run(ctx, lambda c: c.gateway.get("/evo/batches"), render_batches, json_output)


@evo_app.command()
def batch(
    ctx: typer.Context,
    batch_id: str = typer.Option(..., "--batch", help="Batch id"),
    json_output: bool = JsonOption,
):
    """Show one batch and its chunks."""
    _run(ctx, lambda c: c.gateway.get(f"/evo/batch/{batch_id}"), render_batch, json_output)


@evo_app.command()
def start(
    ctx: typer.Context,
    batch_id: Optional[str] = typer.Option(None, "--batch", help="Batch id (default: latest non-empty batch)"),
    depth: DepthName = typer.Option(DepthName.STANDARD, "--depth", help="Evolution depth"),
    json_output: bool = JsonOption,
):
    """Start an evolution run."""
    body = {"batch_id": batch_id, "depth": depth.value}
    _run(ctx, lambda c: c.gateway.post("/evo/start", body), lambda r: render_run(r, "started"), json_output)


@evo_app.command()
def stop(
    ctx: typer.Context,
    run_id: Optional[str] = typer.Option(None, "--run", help="Run id (default: the active run)"),
    json_output: bool = JsonOption,
):
    """Stop the active run at its next stage boundary."""
    _run(ctx, lambda c: c.gateway.post("/evo/stop", {"run_id": run_id}), render_stop, json_output)


@evo_app.command()
def restart(
    ctx: typer.Context,
    run_id: Optional[str] = typer.Option(None, "--run", help="Run id (default: the latest run)"),
    json_output: bool = JsonOption,
):
    """Start a fresh run on a stopped or failed run's batch."""
    _run(
        ctx,
        lambda c: c.gateway.post("/evo/restart", {"run_id": run_id}),
        lambda r: render_run(r, "started"),
        json_output,
    )


@evo_app.command()
def apply(
    ctx: typer.Context,
    batch_id: Optional[str] = typer.Option(None, "--batch", help="Batch id (default: the one ready batch)"),
    json_output: bool = JsonOption,
):
    """Ask the host-daemon to swap in a converged candidate."""
    _run(ctx, lambda c: c.gateway.post("/evo/apply", {"batch_id": batch_id}), render_apply, json_output)


# --- socket subcommands ---


@evo_app.command()
def flag(
    ctx: typer.Context,
    session_id: str = typer.Option(..., "--session", help="Session id to scan now"),
    json_output: bool = JsonOption,
):
    """Scan one session immediately."""
    _run(ctx, lambda c: c.hostd.call("autoscan.flag", {"session_id": session_id}), render_scan, json_output)


@evo_app.command("catch-up")
def catch_up(
    ctx: typer.Context,
    agents: Optional[list[str]] = typer.Option(None, "--agent", help="Limit to these session directories"),
    json_output: bool = JsonOption,
):
    """Scan every session for unseen failure evidence."""
    _run(ctx, lambda c: c.hostd.call("autoscan.catch_up", {"agents": agents or None}), render_scan, json_output)


def main() -> None:
    app()
