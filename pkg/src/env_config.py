"""
Process environment for the harness.

Loads an optional .env file at the repository root and resolves the
directories and log level the CLI runs with. Scenario parameters never come
from here; they live in the scenario config files.
"""

import logging
import os

import dotenv

from config import DEFAULT_CONFIG_DIR, DEFAULT_OUT_DIR

# ── Path constants ──────────────────────────────────────────────────────────

BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

# ── .env key names ──────────────────────────────────────────────────────────

KEY_LOG_LEVEL = "LATENTACT_LOG_LEVEL"
KEY_OUT_DIR = "LATENTACT_OUT_DIR"
KEY_CONFIG_DIR = "LATENTACT_CONFIG_DIR"

_LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


def load_environment(env_file: str | None = None) -> bool:
    """Load `env_file` (default: <repo>/.env) without overriding variables
    already set in the process. Returns whether a file was loaded."""
    dotenv_path = env_file or os.path.join(BASE_DIR, ".env")
    if os.path.exists(dotenv_path):
        dotenv.load_dotenv(dotenv_path, override=False)
        return True
    logging.getLogger(__name__).debug(
        f"No .env file at {dotenv_path}; using process environment only"
    )
    return False


def log_level() -> int:
    """Numeric log level from LATENTACT_LOG_LEVEL; unknown names fall back to INFO."""
    name = os.environ.get(KEY_LOG_LEVEL, "INFO").strip().upper()
    if name not in _LOG_LEVELS:
        name = "INFO"
    return getattr(logging, name)


def default_out_dir() -> str:
    return os.environ.get(KEY_OUT_DIR, "").strip() or DEFAULT_OUT_DIR


def config_dir() -> str:
    """Directory searched for bare config names (`finite-recovery.toml`)."""
    value = os.environ.get(KEY_CONFIG_DIR, "").strip() or DEFAULT_CONFIG_DIR
    if os.path.isabs(value):
        return value
    return os.path.join(BASE_DIR, value)


def resolve_config_path(path: str) -> str:
    """Return `path` if it exists, else the same name under config_dir()."""
    if os.path.exists(path):
        return path
    candidate = os.path.join(config_dir(), path)
    if os.path.exists(candidate):
        return candidate
    return path
