"""
Tests for env_config: .env loading, log level and directory resolution.
"""

import logging
import os

import pytest

import env_config
from env_config import (
    config_dir,
    default_out_dir,
    load_environment,
    log_level,
    resolve_config_path,
)

# ── helpers ────────────────────────────────────────────────────────────────


def _write_env(path, content: dict):
    with open(path, "w") as f:
        f.writelines(f"{k}={v}\n" for k, v in content.items())


# ── .env loading ───────────────────────────────────────────────────────────


class TestLoadEnvironment:

    def test_loads_values_from_file(self, clean_env, tmp_path):
        env_file = tmp_path / ".env"
        _write_env(env_file, {"LATENTACT_LOG_LEVEL": "DEBUG"})
        try:
            assert load_environment(str(env_file)) is True
            assert os.environ["LATENTACT_LOG_LEVEL"] == "DEBUG"
        finally:
            os.environ.pop("LATENTACT_LOG_LEVEL", None)

    def test_process_environment_wins(self, clean_env, tmp_path):
        env_file = tmp_path / ".env"
        _write_env(env_file, {"LATENTACT_OUT_DIR": "from-file"})
        clean_env.setenv("LATENTACT_OUT_DIR", "from-process")
        load_environment(str(env_file))
        assert os.environ["LATENTACT_OUT_DIR"] == "from-process"

    def test_missing_file_is_not_an_error(self, clean_env, tmp_path):
        assert load_environment(str(tmp_path / "absent.env")) is False


# ── resolved values ────────────────────────────────────────────────────────


class TestResolvedValues:

    @pytest.mark.parametrize(
        "value, expected",
        [("debug", logging.DEBUG), ("WARNING", logging.WARNING), ("loud", logging.INFO), ("", logging.INFO)],
    )
    def test_log_level(self, clean_env, value, expected):
        clean_env.setenv("LATENTACT_LOG_LEVEL", value)
        assert log_level() == expected

    def test_log_level_default(self, clean_env):
        assert log_level() == logging.INFO

    def test_out_dir_default_and_override(self, clean_env):
        assert default_out_dir() == "runs"
        clean_env.setenv("LATENTACT_OUT_DIR", "  /tmp/elsewhere ")
        assert default_out_dir() == "/tmp/elsewhere"

    def test_relative_config_dir_is_under_repo(self, clean_env):
        assert config_dir() == os.path.join(env_config.BASE_DIR, "configs")

    def test_absolute_config_dir(self, clean_env, tmp_path):
        clean_env.setenv("LATENTACT_CONFIG_DIR", str(tmp_path))
        assert config_dir() == str(tmp_path)

    def test_existing_path_is_kept(self, clean_env, tmp_path):
        path = tmp_path / "x.toml"
        path.write_text("")
        assert resolve_config_path(str(path)) == str(path)

    def test_bare_name_found_in_config_dir(self, clean_env, tmp_path):
        (tmp_path / "x.toml").write_text("")
        clean_env.setenv("LATENTACT_CONFIG_DIR", str(tmp_path))
        assert resolve_config_path("x.toml") == os.path.join(str(tmp_path), "x.toml")

    def test_unresolvable_name_is_returned_unchanged(self, clean_env, tmp_path):
        clean_env.setenv("LATENTACT_CONFIG_DIR", str(tmp_path))
        assert resolve_config_path("nowhere.toml") == "nowhere.toml"
