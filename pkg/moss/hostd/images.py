import hashlib
import io
from abc import ABC, abstractmethod
from datetime import datetime
from typing import TYPE_CHECKING

import docker
from pydantic import BaseModel, Field

from moss.core.models import ImageRef, utcnow
from moss.core.state_store import StateStore
from moss.errors import BuildFailed, IoFailure
from moss.hostd.runtime import get_docker_client
from moss.logger import get_logger

if TYPE_CHECKING:
    from moss.pipeline.workspace import GitWorkspace

logger = get_logger("hostd.images")

REGISTRY_KEY = "images/registry.json"
LKG_KEY = "swap/last_known_good.json"


class RegistryEntry(BaseModel):
    built_from_rev: str
    built_at: datetime
    tags: list[str] = []


class LastKnownGood(BaseModel):
    image: ImageRef
    recorded_at: datetime = Field(default_factory=utcnow)


class ImageRegistry:
    """``images/registry.json``: image_id -> {built_from_rev, built_at, tags}."""

    def __init__(self, store: StateStore):
        self.store = store

    def entries(self) -> dict[str, RegistryEntry]:
        raw = self.store.read_json(REGISTRY_KEY) or {}
        return {image_id: RegistryEntry.model_validate(entry) for image_id, entry in raw.items()}

    def _save(self, entries: dict[str, RegistryEntry]) -> None:
        self.store.write_json(REGISTRY_KEY, {k: v.model_dump(mode="json") for k, v in entries.items()})

    def record(self, ref: ImageRef) -> None:
        entries = self.entries()
        existing = entries.get(ref.image_id)
        entries[ref.image_id] = RegistryEntry(
            built_from_rev=ref.built_from_rev,
            built_at=ref.built_at,
            tags=existing.tags if existing else [],
        )
        self._save(entries)

    def get(self, image_id: str) -> ImageRef | None:
        entry = self.entries().get(image_id)
        if entry is None:
            return None
        return ImageRef(image_id=image_id, built_from_rev=entry.built_from_rev, built_at=entry.built_at)

    def tag(self, image_id: str, tag: str) -> None:
        entries = self.entries()
        if image_id not in entries:
            raise IoFailure(f"image {image_id} is not registered")
        if tag not in entries[image_id].tags:
            entries[image_id].tags.append(tag)
        self._save(entries)

    def forget(self, image_id: str) -> None:
        entries = self.entries()
        entries.pop(image_id, None)
        self._save(entries)

    def last_known_good(self) -> LastKnownGood | None:
        return self.store.read_model(LKG_KEY, LastKnownGood)

    def set_last_known_good(self, image: ImageRef) -> LastKnownGood:
        lkg = LastKnownGood(image=image)
        self.store.write_model(LKG_KEY, lkg)
        logger.info(f"last-known-good is now {image.image_id}")
        return lkg


class ImageBuilder(ABC):
    @abstractmethod
    def build(self, rev: str) -> ImageRef: ...


class SimulatedBuilder(ImageBuilder):
    """image_id = hash of the git tree at ``rev``; identical trees give identical ids."""

    def __init__(self, workspace: "GitWorkspace", fail_revs: set[str] | None = None):
        self.workspace = workspace
        self.fail_revs = fail_revs or set()

    def build(self, rev: str) -> ImageRef:
        if rev in self.fail_revs:
            raise BuildFailed(f"simulated build of {rev[:12]} exited 1")
        try:
            tree = self.workspace.tree_hash(rev)
        except IoFailure as e:
            raise BuildFailed(f"cannot resolve {rev}: {e.message}") from e
        image_id = "sim-" + hashlib.sha256(tree.encode("utf-8")).hexdigest()[:16]
        return ImageRef(image_id=image_id, built_from_rev=rev)


class DockerBuilder(ImageBuilder):
    """Builds the substrate image from ``git archive <rev>`` with the docker SDK."""

    def __init__(self, workspace: "GitWorkspace", repository: str = "moss-substrate"):
        self.workspace = workspace
        self.repository = repository

    def build(self, rev: str) -> ImageRef:
        try:
            context = self.workspace.archive(rev)
        except IoFailure as e:
            raise BuildFailed(e.message) from e
        tag = f"{self.repository}:{rev[:12]}"
        logger.info(f"building {tag}")
        try:
            image, _ = get_docker_client().images.build(
                fileobj=io.BytesIO(context),
                custom_context=True,
                tag=tag,
                rm=True,
                labels={"moss.rev": rev},
            )
        except (docker.errors.BuildError, docker.errors.APIError) as e:
            logger.error(f"build of {tag} failed: {e}")
            raise BuildFailed(f"docker build of {rev[:12]} failed: {e}") from e
        return ImageRef(image_id=image.id, built_from_rev=rev)
