import os
from dataclasses import dataclass, replace
from functools import cache
from pathlib import Path

import yaml
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# Logging configuration
LOG_LEVEL = os.environ.get("LOG_LEVEL", "INFO").upper()

# State directory shared by the host-daemon, the evolution service and the gateway
STATE_DIR = os.path.abspath(os.environ.get("MOSS_STATE_DIR", "state"))

# Session JSONL directories, one per agent
SESSIONS_DIRS = [
    os.path.abspath(p)
    for p in os.environ.get("MOSS_SESSIONS_DIRS", "sessions").split(os.pathsep)
    if p
]

# Inner substrate repository the coding agent edits
WORKSPACE_DIR = os.path.abspath(os.environ.get("MOSS_WORKSPACE_DIR", "substrate"))

# Transports
HOSTD_SOCKET = os.environ.get("MOSS_HOSTD_SOCKET", "/tmp/moss-hostd.sock")
GATEWAY_URL = os.environ.get("MOSS_GATEWAY_URL", "http://localhost:8080")
EVO_SERVICE_URL = os.environ.get("MOSS_EVO_SERVICE_URL", "http://localhost:8090")
WEBHOOK_URL = os.environ.get("MOSS_WEBHOOK_URL", f"{GATEWAY_URL}/hooks/moss")

# Evidence curation
SEAL_THRESHOLD = int(os.environ.get("MOSS_SEAL_THRESHOLD", "8"))
AUTOSCAN_SIDECAR = os.environ.get("MOSS_AUTOSCAN_SIDECAR")

# Runners
DEFAULT_RUNNER = os.environ.get("MOSS_RUNNER", "scripted")
RUNNER_SCRIPT = os.environ.get("MOSS_RUNNER_SCRIPT")
RUNNER_MODE = os.environ.get("MOSS_RUNNER_MODE", "direct")  # direct | rpc

# Container runtime: simulated | docker
RUNTIME = os.environ.get("MOSS_RUNTIME", "simulated")
SUBSTRATE_IMAGE = os.environ.get("MOSS_SUBSTRATE_IMAGE", "moss-gateway:initial")
SUBSTRATE_CONTAINER = os.environ.get("MOSS_SUBSTRATE_CONTAINER", "moss-gateway")
SUBSTRATE_NETWORK = os.environ.get("MOSS_SUBSTRATE_NETWORK", "moss-live")

# User state survives image swaps: a named volume mounted into the substrate.
USER_STATE_VOLUME = os.environ.get("MOSS_USER_STATE_VOLUME", "user-state")
USER_STATE_MOUNT = os.environ.get("MOSS_USER_STATE_MOUNT", "/user-state")
# Where this process reads user state: the mount inside the substrate, the
# volume's data directory on the host.
USER_STATE_DIR = os.path.abspath(os.environ.get("MOSS_USER_STATE_DIR", "user-state"))
# Where the substrate sees the shared state directory
STATE_MOUNT = "/state"
SUBSTRATE_EVO_SERVICE_URL = os.environ.get("MOSS_SUBSTRATE_EVO_SERVICE_URL", "http://moss-evo:8090")

# Global divisor applied to every protocol duration
TIME_SCALE = float(os.environ.get("MOSS_TIME_SCALE", "1.0"))

CONFIG_FILE = os.environ.get("MOSS_CONFIG_FILE")


@dataclass(frozen=True)
class Timings:
    """Protocol durations in seconds."""

    swap_poll: float = 2.0
    probe_window: float = 90.0
    probe_sample: float = 5.0
    heartbeat_freshness: float = 30.0
    heartbeat_refresh: float = 10.0
    trial_timeout: float = 300.0
    runner_timeout: float = float(os.environ.get("MOSS_RUNNER_TIMEOUT", "900"))

    @property
    def probe_samples(self) -> int:
        """Number of samples in one probe window (t=0, sample, ..., window-sample)."""
        return int(round(self.probe_window / self.probe_sample))

    def scaled(self, factor: float) -> "Timings":
        if factor <= 0:
            raise ValueError(f"time scale must be positive, got {factor}")
        return replace(
            self,
            swap_poll=self.swap_poll / factor,
            probe_window=self.probe_window / factor,
            probe_sample=self.probe_sample / factor,
            heartbeat_freshness=self.heartbeat_freshness / factor,
            heartbeat_refresh=self.heartbeat_refresh / factor,
            trial_timeout=self.trial_timeout / factor,
            runner_timeout=self.runner_timeout / factor,
        )


def substrate_env() -> dict[str, str]:
    """Environment the host-daemon hands to every live substrate container."""
    return {
        "MOSS_STATE_DIR": STATE_MOUNT,
        "MOSS_USER_STATE_DIR": USER_STATE_MOUNT,
        "MOSS_EVO_SERVICE_URL": SUBSTRATE_EVO_SERVICE_URL,
        "LOG_LEVEL": LOG_LEVEL,
    }


def get_timings() -> Timings:
    """Get the configured protocol timings with the global time scale applied."""
    timings = Timings(
        trial_timeout=float(os.environ.get("MOSS_TRIAL_TIMEOUT", "300")),
    )
    return timings.scaled(TIME_SCALE)


@cache
def load_config_file() -> dict:
    """Load the optional YAML override file.

    Recognised top-level keys: ``depth_profiles``, ``runner_overrides``,
    ``runner_presets``, ``cli_probes``.
    """
    if not CONFIG_FILE:
        return {}
    path = Path(CONFIG_FILE)
    if not path.exists():
        print(f"Error: MOSS_CONFIG_FILE points at a missing file: {path}")
        exit(1)
    with open(path, "r", encoding="utf-8") as f:
        return yaml.safe_load(f) or {}
