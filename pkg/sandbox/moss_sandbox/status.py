"""``moss-sandbox-status``: substrate-level status commands run inside the gateway container.

The host-daemon's post-swap probe executes two of them; exit 0 means healthy.
"""

import enum

import httpx
import typer

from moss_sandbox.config import GATEWAY_PORT

app = typer.Typer(add_completion=False)


class Component(str, enum.Enum):
    GATEWAY = "gateway"
    HOOKS = "hooks"


COMPONENT_PATHS = {
    Component.GATEWAY: "/health",
    Component.HOOKS: "/admin/messages",
}


@app.command()
def status(
    component: Component = typer.Argument(..., help="Component to check"),
    port: int = typer.Option(GATEWAY_PORT, "--port", help="Gateway port inside the container"),
    timeout: float = typer.Option(3.0, "--timeout"),
):
    """Exit 0 when the component answers, 1 otherwise."""
    url = f"http://127.0.0.1:{port}{COMPONENT_PATHS[component]}"
    try:
        response = httpx.get(url, timeout=timeout)
        response.raise_for_status()
    except httpx.HTTPError as e:
        typer.echo(f"{component.value}: unhealthy ({e})", err=True)
        raise typer.Exit(1)
    typer.echo(f"{component.value}: ok")


def main() -> None:
    app()
