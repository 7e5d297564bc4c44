"""Container runtime used for the live substrate and for trial workers."""

import json
from abc import ABC, abstractmethod
from collections.abc import Callable, Iterator
from functools import cache

import docker
from pydantic import BaseModel

from moss.errors import RuntimeFailure
from moss.logger import get_logger

logger = get_logger("hostd.runtime")

TRIAL_LABEL = "moss.role"
TRIAL_ROLE = "trial-worker"


@cache
def get_docker_client() -> docker.DockerClient:
    """Get a cached Docker client instance.

    Returns:
        Docker client instance.

    """
    return docker.from_env()


class ContainerInfo(BaseModel):
    name: str
    # Resolved image id, not the tag the container was started from.
    image_id: str
    running: bool
    # Mount sources: volume names or host paths.
    mounts: list[str] = []
    env: dict[str, str] = {}
    networks: list[str] = []
    labels: dict[str, str] = {}


class ExecResult(BaseModel):
    exit_code: int
    output: str = ""


OutputSink = Callable[[bytes], None]


class ContainerRuntime(ABC):
    @abstractmethod
    def start(
        self,
        name: str,
        image_id: str,
        *,
        mounts: dict[str, str] | None = None,
        env: dict[str, str] | None = None,
        networks: list[str] | None = None,
        labels: dict[str, str] | None = None,
    ) -> ContainerInfo:
        """Start ``name`` from ``image_id``; ``mounts`` maps a volume name or host path to its container path."""

    @abstractmethod
    def resolve_image(self, image_ref: str) -> str | None:
        """Resolve a tag or id to the image id containers report, or None if unknown."""

    @abstractmethod
    def stop(self, name: str) -> None: ...

    @abstractmethod
    def remove(self, name: str) -> None: ...

    @abstractmethod
    def inspect(self, name: str) -> ContainerInfo | None: ...

    @abstractmethod
    def exec(self, name: str, command: list[str], on_output: OutputSink | None = None) -> ExecResult:
        """Run ``command`` to completion; ``on_output`` sees output chunks as they arrive."""

    @abstractmethod
    def containers(self, label: str | None = None) -> list[ContainerInfo]:
        """List containers, optionally those carrying ``key=value`` label."""

    def stop_and_remove(self, name: str) -> None:
        if self.inspect(name) is None:
            return
        self.stop(name)
        self.remove(name)


# A behavior returns its result, or yields output chunks and returns the exit code.
ExecBehavior = Callable[[ContainerInfo, list[str]], ExecResult | Iterator[str]]


class SimulatedRuntime(ContainerRuntime):
    """In-process container model with scriptable behavior.

    ``exec_behaviors`` maps ``(image_id or "*", argv[0])`` to a callable
    producing the exec result; unmatched commands exit 0. ``fail_start``
    holds image ids whose start raises ``RuntimeFailure``. ``image_ids``
    maps tags to the ids containers report; unmapped refs are their own id.
    """

    def __init__(self) -> None:
        self._containers: dict[str, ContainerInfo] = {}
        self.exec_behaviors: dict[tuple[str, str], ExecBehavior] = {}
        self.fail_start: set[str] = set()
        self.image_ids: dict[str, str] = {}
        self.events: list[tuple[str, str, str]] = []

    def start(self, name, image_id, *, mounts=None, env=None, networks=None, labels=None) -> ContainerInfo:
        if image_id in self.fail_start:
            raise RuntimeFailure(f"simulated start failure for {image_id}")
        existing = self._containers.get(name)
        if existing is not None and existing.running:
            raise RuntimeFailure(f"container {name} is already running")
        info = ContainerInfo(
            name=name,
            image_id=self.image_ids.get(image_id, image_id),
            running=True,
            mounts=list(mounts or {}),
            env=dict(env or {}),
            networks=list(networks or []),
            labels=dict(labels or {}),
        )
        self._containers[name] = info
        self.events.append(("start", name, image_id))
        return info

    def resolve_image(self, image_ref: str) -> str | None:
        return self.image_ids.get(image_ref, image_ref)

    def stop(self, name: str) -> None:
        info = self._containers.get(name)
        if info is None:
            raise RuntimeFailure(f"no such container: {name}")
        info.running = False
        self.events.append(("stop", name, info.image_id))

    def remove(self, name: str) -> None:
        info = self._containers.pop(name, None)
        if info is not None:
            self.events.append(("remove", name, info.image_id))

    def inspect(self, name: str) -> ContainerInfo | None:
        info = self._containers.get(name)
        return info.model_copy() if info else None

    def exec(self, name: str, command: list[str], on_output: OutputSink | None = None) -> ExecResult:
        info = self._containers.get(name)
        if info is None or not info.running:
            raise RuntimeFailure(f"container {name} is not running")
        behavior = self.exec_behaviors.get((info.image_id, command[0])) or self.exec_behaviors.get(("*", command[0]))
        if behavior is None:
            return ExecResult(exit_code=0)
        result = behavior(info, command)
        if isinstance(result, ExecResult):
            if on_output is not None and result.output:
                on_output(result.output.encode("utf-8"))
            return result
        chunks: list[str] = []
        while True:
            try:
                chunk = next(result)
            except StopIteration as done:
                return ExecResult(exit_code=done.value or 0, output="".join(chunks))
            chunks.append(chunk)
            if on_output is not None:
                on_output(chunk.encode("utf-8"))

    def containers(self, label: str | None = None) -> list[ContainerInfo]:
        infos = [i.model_copy() for i in self._containers.values()]
        if label:
            key, _, value = label.partition("=")
            infos = [i for i in infos if i.labels.get(key) == value]
        return sorted(infos, key=lambda i: i.name)


class DockerRuntime(ContainerRuntime):
    """docker SDK adapter. Mount sources may be named volumes or host paths."""

    def start(self, name, image_id, *, mounts=None, env=None, networks=None, labels=None) -> ContainerInfo:
        client = get_docker_client()
        volumes = {source: {"bind": target, "mode": "rw"} for source, target in (mounts or {}).items()}
        try:
            container = client.containers.run(
                image=image_id,
                name=name,
                detach=True,
                volumes=volumes,
                environment=dict(env or {}),
                network=(networks or [None])[0],
                labels=dict(labels or {}),
            )
        except docker.errors.DockerException as e:
            logger.error(f"failed to start {name} from {image_id}: {e}")
            raise RuntimeFailure(f"docker start of {name} failed: {e}") from e
        logger.info(f"Docker container {name} started from {image_id}")
        return self._info(container)

    def resolve_image(self, image_ref: str) -> str | None:
        try:
            return get_docker_client().images.get(image_ref).id
        except docker.errors.ImageNotFound:
            return None
        except docker.errors.DockerException as e:
            raise RuntimeFailure(f"docker image lookup of {image_ref} failed: {e}") from e

    def stop(self, name: str) -> None:
        try:
            get_docker_client().containers.get(name).stop()
        except docker.errors.DockerException as e:
            raise RuntimeFailure(f"docker stop of {name} failed: {e}") from e

    def remove(self, name: str) -> None:
        try:
            get_docker_client().containers.get(name).remove(force=True)
        except docker.errors.NotFound:
            pass
        except docker.errors.DockerException as e:
            raise RuntimeFailure(f"docker remove of {name} failed: {e}") from e

    def inspect(self, name: str) -> ContainerInfo | None:
        try:
            container = get_docker_client().containers.get(name)
        except docker.errors.NotFound:
            return None
        except docker.errors.DockerException as e:
            raise RuntimeFailure(f"docker inspect of {name} failed: {e}") from e
        return self._info(container)

    def exec(self, name: str, command: list[str], on_output: OutputSink | None = None) -> ExecResult:
        api = get_docker_client().api
        output = bytearray()
        try:
            exec_id = api.exec_create(name, command)["Id"]
            for chunk in api.exec_start(exec_id, stream=True):
                output.extend(chunk)
                if on_output is not None:
                    on_output(chunk)
            exit_code = api.exec_inspect(exec_id)["ExitCode"]
        except docker.errors.DockerException as e:
            raise RuntimeFailure(f"docker exec in {name} failed: {e}") from e
        return ExecResult(exit_code=exit_code, output=output.decode("utf-8", errors="replace"))

    def containers(self, label: str | None = None) -> list[ContainerInfo]:
        filters = {"label": label} if label else {}
        try:
            found = get_docker_client().containers.list(all=True, filters=filters)
        except docker.errors.DockerException as e:
            raise RuntimeFailure(f"docker list failed: {e}") from e
        return sorted((self._info(c) for c in found), key=lambda i: i.name)

    @staticmethod
    def _info(container) -> ContainerInfo:
        container.reload()
        attrs = container.attrs
        return ContainerInfo(
            name=container.name,
            image_id=attrs.get("Image", ""),
            running=attrs.get("State", {}).get("Running", False),
            mounts=[m.get("Name") or m.get("Source", "") for m in attrs.get("Mounts", [])],
            env=dict(item.partition("=")[::2] for item in attrs.get("Config", {}).get("Env") or []),
            networks=list(attrs.get("NetworkSettings", {}).get("Networks", {}) or {}),
            labels=attrs.get("Config", {}).get("Labels", {}) or {},
        )


def get_runtime(kind: str) -> ContainerRuntime:
    if kind == "docker":
        return DockerRuntime()
    if kind == "simulated":
        return SimulatedRuntime()
    raise RuntimeFailure(f"unknown runtime {kind!r}; expected simulated or docker")


def json_exec(payload: dict, exit_code: int = 0) -> ExecResult:
    return ExecResult(exit_code=exit_code, output=json.dumps(payload))
