from moss.cli.main import CliContext, app

__all__ = ["CliContext", "app"]
