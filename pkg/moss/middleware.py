from starlette.middleware.base import BaseHTTPMiddleware
from starlette.types import ASGIApp


class OrchestratorMiddleware(BaseHTTPMiddleware):
    """Expose the app's orchestrator as ``request.state.orchestrator`` on whitelisted paths."""

    def __init__(
        self,
        app: ASGIApp,
        whitelisted_prefixes: list[str],
        **kwargs,
    ) -> None:
        super().__init__(app, **kwargs)
        self.whitelisted_prefixes = tuple(whitelisted_prefixes)

    async def dispatch(self, request, call_next):
        whitelisted = request.scope["path"].startswith(self.whitelisted_prefixes)
        if not whitelisted:
            return await call_next(request)

        # set by the lifespan handler; absent only if startup failed
        request.state.orchestrator = getattr(request.app.state, "orchestrator", None)
        return await call_next(request)
