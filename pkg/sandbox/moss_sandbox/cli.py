import typer

from moss.errors import UnknownScenario
from moss_sandbox.scenarios import SCENARIOS, generate_sessions

app = typer.Typer(add_completion=False, help="Generate seeded session traffic")


@app.command()
def generate(
    scenario: str = typer.Argument(..., help=f"One of: {', '.join(sorted(SCENARIOS))}"),
    out: str = typer.Option("sessions", "--out", help="Directory for session JSONL files"),
):
    """Write a scenario's session files and evaluator sidecar."""
    try:
        result = generate_sessions(scenario, out)
    except UnknownScenario as e:
        typer.echo(f"Error: {e.message}", err=True)
        raise typer.Exit(1)
    typer.echo(f"{len(result.sessions)} session(s), {result.deficient_chunks} deficient exchange(s)")
    typer.echo(f"sidecar: {result.sidecar}  (set MOSS_AUTOSCAN_SIDECAR to use it)")


def main() -> None:
    app()
