"""Host-side operations the evolution service needs: image builds and trial workers.

In-process for tests and single-host setups; over the hostd socket when the
service runs inside the substrate container.
"""

import asyncio
from abc import ABC, abstractmethod

from moss.core.models import ImageRef
from moss.hostd.images import ImageBuilder, ImageRegistry
from moss.hostd.rpc import RpcClient
from moss.trials.workers import TrialBackend, TrialHost, TrialTask, TrialTranscript


class HostOps(ABC):
    @abstractmethod
    async def build(self, rev: str) -> ImageRef: ...

    @abstractmethod
    def trial_backend(self) -> TrialBackend: ...


class LocalHostOps(HostOps):
    def __init__(self, builder: ImageBuilder, images: ImageRegistry, trials: TrialHost):
        self.builder = builder
        self.images = images
        self.trials = trials

    async def build(self, rev: str) -> ImageRef:
        image = await asyncio.to_thread(self.builder.build, rev)
        self.images.record(image)
        return image

    def trial_backend(self) -> TrialBackend:
        return self.trials


class RpcTrialBackend:
    def __init__(self, client: RpcClient):
        self.client = client

    async def spawn(self, image_id: str) -> str:
        result = await self.client.call("trial.spawn", {"image_id": image_id})
        return result["worker_id"]

    async def exec(self, worker_id: str, task: TrialTask, trial_index: int, key: str) -> TrialTranscript:
        result = await self.client.call(
            "trial.exec",
            {"worker_id": worker_id, "task": task.model_dump(), "trial_index": trial_index, "key": key},
        )
        return TrialTranscript.model_validate(result["transcript"])

    async def teardown(self, worker_id: str) -> None:
        await self.client.call("trial.teardown", {"worker_id": worker_id})


class RpcHostOps(HostOps):
    def __init__(self, client: RpcClient):
        self.client = client

    async def build(self, rev: str) -> ImageRef:
        return ImageRef.model_validate(await self.client.call("image.build", {"rev": rev}))

    def trial_backend(self) -> TrialBackend:
        return RpcTrialBackend(self.client)
