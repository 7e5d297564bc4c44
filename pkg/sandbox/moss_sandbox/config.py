import os
from pathlib import Path

from moss.config import EVO_SERVICE_URL, USER_STATE_DIR as USER_STATE_PATH

"""Configuration constants for the moss sandbox gateway."""

GATEWAY_HOST = os.environ.get("MOSS_GATEWAY_HOST", "0.0.0.0")
GATEWAY_PORT = int(os.environ.get("MOSS_GATEWAY_PORT", "8080"))

# Forward target for the /evo/* endpoint group
EVOLUTION_SERVICE_URL = EVO_SERVICE_URL

# The user-state volume survives image swaps; the heartbeat and the system
# message log live there.
USER_STATE_DIR = Path(USER_STATE_PATH)
HEARTBEAT_FILE = USER_STATE_DIR / "heartbeat.json"
MESSAGE_LOG_FILE = USER_STATE_DIR / "system_messages.jsonl"

# Optional YAML/JSON file overriding the hook-mapping templates
HOOK_MAPPING_FILE = os.environ.get("MOSS_HOOK_MAPPING_FILE")
