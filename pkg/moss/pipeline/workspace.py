import subprocess
from abc import ABC, abstractmethod
from pathlib import Path

from moss.errors import IoFailure
from moss.logger import get_logger

logger = get_logger("pipeline.workspace")

GIT_IDENTITY = ["-c", "user.name=moss", "-c", "user.email=moss@localhost", "-c", "commit.gpgsign=false"]


class Workspace(ABC):
    """Checkout of the inner substrate repository the coding agent edits."""

    path: Path

    @abstractmethod
    def current_rev(self) -> str: ...

    @abstractmethod
    def commit(self, message: str) -> str: ...

    @abstractmethod
    def reset_hard(self, rev: str) -> None: ...

    @abstractmethod
    def diff(self, rev_a: str, rev_b: str) -> str: ...


class GitWorkspace(Workspace):
    def __init__(self, path: str | Path):
        self.path = Path(path)

    @classmethod
    def init(cls, path: str | Path, files: dict[str, str] | None = None) -> "GitWorkspace":
        """Create a repository with one initial commit holding ``files``."""
        workspace = cls(path)
        workspace.path.mkdir(parents=True, exist_ok=True)
        workspace._git("init", "-q")
        for rel, content in (files or {"README.md": "substrate\n"}).items():
            target = workspace.path / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(content, encoding="utf-8")
        workspace.commit("initial substrate")
        return workspace

    def _git(self, *args: str) -> str:
        try:
            result = subprocess.run(
                ["git", *GIT_IDENTITY, *args],
                cwd=self.path,
                capture_output=True,
                text=True,
                check=True,
            )
        except subprocess.CalledProcessError as e:
            raise IoFailure(f"git {' '.join(args)} failed: {e.stderr.strip()}") from e
        except OSError as e:
            raise IoFailure(f"git unavailable: {e}") from e
        return result.stdout

    def current_rev(self) -> str:
        return self._git("rev-parse", "HEAD").strip()

    def is_dirty(self) -> bool:
        return bool(self._git("status", "--porcelain").strip())

    def commit(self, message: str) -> str:
        self._git("add", "-A")
        self._git("commit", "-q", "--allow-empty", "-m", message)
        rev = self.current_rev()
        logger.info(f"committed {rev[:12]}: {message}")
        return rev

    def commits_since(self, rev: str) -> list[str]:
        out = self._git("rev-list", "--reverse", f"{rev}..HEAD")
        return [line for line in out.splitlines() if line]

    def squash_onto(self, base_rev: str, message: str) -> str:
        """Fold everything since ``base_rev`` (committed or not) into one commit."""
        self._git("reset", "-q", "--soft", base_rev)
        return self.commit(message)

    def reset_hard(self, rev: str) -> None:
        self._git("reset", "-q", "--hard", rev)
        self._git("clean", "-q", "-fdx")

    def diff(self, rev_a: str, rev_b: str) -> str:
        return self._git("diff", "--binary", rev_a, rev_b)

    def tree_hash(self, rev: str = "HEAD") -> str:
        return self._git("rev-parse", f"{rev}^{{tree}}").strip()

    def archive(self, rev: str) -> bytes:
        """Tar archive of the tree at ``rev`` (build context)."""
        try:
            return subprocess.run(
                ["git", "archive", "--format=tar", rev],
                cwd=self.path,
                capture_output=True,
                check=True,
            ).stdout
        except subprocess.CalledProcessError as e:
            raise IoFailure(f"git archive {rev} failed: {e.stderr.decode(errors='replace').strip()}") from e
