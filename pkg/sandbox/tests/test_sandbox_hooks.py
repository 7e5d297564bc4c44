import pytest
from pydantic import ValidationError

from moss.webhooks import WebhookEvent, WebhookPayload
from moss_sandbox.hooks import DEFAULT_HOOK_TEMPLATES, HookMapping, SystemMessageLog


def converged(delivery_id: str = "run-1:converged") -> WebhookPayload:
    return WebhookPayload(
        event=WebhookEvent.EVOLUTION_CONVERGED,
        run_id="run-1",
        batch_id="batch-1",
        status="converged",
        detail={"candidate_image": "moss-gateway:abc123", "peak_iteration": 2},
        ts="2026-01-05T09:00:00+00:00",
        delivery_id=delivery_id,
    )


class TestHookMapping:
    def test_default_templates_cover_every_event(self):
        mapping = HookMapping()

        assert set(mapping.templates) == {e.value for e in WebhookEvent}

    def test_render_fills_payload_and_detail_fields(self):
        text = HookMapping().render(converged())

        assert "run-1" in text
        assert "batch-1" in text
        assert "moss-gateway:abc123" in text
        assert "peak iteration 2" in text

    def test_missing_fields_render_as_dash(self):
        payload = WebhookPayload(
            event=WebhookEvent.EVOLUTION_FAILED,
            status="failed",
            ts="2026-01-05T09:00:00+00:00",
            delivery_id="x",
        )

        text = HookMapping().render(payload)

        assert "Evolution run - on batch - ended failed: -." in text

    def test_incomplete_mapping_is_rejected(self):
        with pytest.raises(ValidationError, match="no template"):
            HookMapping(templates={WebhookEvent.APPLY_COMPLETE.value: "{status}"})

    def test_load_merges_overrides(self, tmp_path):
        path = tmp_path / "hooks.yaml"
        path.write_text('apply-complete: "swap {request_id}: {status}"\n')

        mapping = HookMapping.load(path)

        assert mapping.templates["apply-complete"] == "swap {request_id}: {status}"
        assert mapping.templates["evolution-converged"] == DEFAULT_HOOK_TEMPLATES["evolution-converged"]

    def test_load_without_path_uses_defaults(self):
        assert HookMapping.load(None).templates == DEFAULT_HOOK_TEMPLATES


class TestSystemMessageLog:
    async def test_repeated_delivery_is_appended_once(self, tmp_path):
        log = SystemMessageLog(tmp_path / "messages.jsonl")
        mapping = HookMapping()

        first = await log.append(converged(), mapping)
        again = await log.append(converged(), mapping)

        assert first is not None
        assert again is None
        assert [m.delivery_id for m in log.entries()] == ["run-1:converged"]

    async def test_entries_survive_reload(self, tmp_path):
        path = tmp_path / "messages.jsonl"
        log = SystemMessageLog(path)
        await log.append(converged("a"), HookMapping())
        await log.append(converged("b"), HookMapping())

        reloaded = SystemMessageLog(path)

        assert [m.delivery_id for m in reloaded.entries()] == ["a", "b"]
        assert await reloaded.append(converged("a"), HookMapping()) is None

    async def test_in_memory_log(self):
        log = SystemMessageLog()

        await log.append(converged(), HookMapping())

        assert len(log.entries()) == 1
        assert log.entries()[0].event is WebhookEvent.EVOLUTION_CONVERGED
