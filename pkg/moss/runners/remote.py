from moss.core.state_store import StateStore
from moss.hostd.rpc import RpcClient
from moss.runners.base import (
    HandleState,
    InvocationPlan,
    Runner,
    RunnerHandle,
    RunnerSpec,
    StageOutput,
)


class RemoteRunner(Runner):
    """Runner whose four methods execute on the host-daemon via ``runner.*`` RPC.

    Used by the containerized evolution service so coding-agent CLIs run on
    the host with the host's credentials and egress.
    """

    def __init__(self, store: StateStore, client: RpcClient, target: str):
        super().__init__(store)
        self.client = client
        self.target = target
        self.provider_name = f"remote:{target}"

    async def prepare(self, spec: RunnerSpec) -> InvocationPlan:
        spec = spec.model_copy(update={"provider_name": self.target})
        data = await self.client.call("runner.prepare", {"spec": spec.model_dump(mode="json")})
        return InvocationPlan.model_validate(data)

    async def launch(self, plan: InvocationPlan) -> RunnerHandle:
        data = await self.client.call("runner.launch", {"invocation_id": plan.invocation_id})
        return RunnerHandle.model_validate(data)

    async def collect(self, handle: RunnerHandle) -> StageOutput:
        data = await self.client.call("runner.collect", {"invocation_id": handle.invocation_id})
        handle.mark(HandleState(data["state"]))
        return StageOutput.model_validate(data["output"])

    async def cancel(self, handle: RunnerHandle) -> None:
        if handle.is_terminal:
            return
        await self.client.call("runner.cancel", {"invocation_id": handle.invocation_id})
        handle.mark(HandleState.CANCELLED)
