"""
Tests for the latentact-id command line: envelopes and exit codes.
"""

import json

import pytest

from cli import EXIT_ERROR, EXIT_FAILED_CHECKS, EXIT_OK, main


def _envelope(capsys) -> dict:
    return json.loads(capsys.readouterr().out)


@pytest.mark.unit
class TestCli:

    def test_list_scenarios(self, capsys, clean_env):
        assert main(["list-scenarios"]) == EXIT_OK
        doc = _envelope(capsys)
        assert doc["success"] is True
        names = {s["name"] for s in doc["scenarios"]}
        assert {"prop1-counterexample", "finite-recovery", "global-alignment"} <= names

    def test_validate_prints_normalized_config(self, capsys, clean_env, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text('scenario = "prop1-counterexample"\nseed = 11\n')
        assert main(["validate", "--config", str(path)]) == EXIT_OK
        config = _envelope(capsys)["config"]
        assert config["seed"] == 11
        assert config["solver"]["k"] == 3

    def test_validate_reports_invalid_config(self, capsys, clean_env, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text('scenario = "prop1-counterexample"\nseed = 1\n[solver]\nk = -2\n')
        assert main(["validate", "--config", str(path)]) == EXIT_ERROR
        doc = _envelope(capsys)
        assert doc["success"] is False
        assert doc["error"] == "invalid_config"

    def test_run_writes_report(self, capsys, clean_env, tmp_path):
        out = tmp_path / "run"
        status = main(
            ["run", "--scenario", "prop1-counterexample", "--seed", "1", "--out", str(out)]
        )
        summary = _envelope(capsys)
        assert status == (EXIT_OK if summary["passed"] else EXIT_FAILED_CHECKS)
        assert (out / "report.json").exists()

    def test_seed_flag_overrides_config(self, capsys, clean_env, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text('scenario = "prop1-counterexample"\nseed = 1\n')
        out = tmp_path / "run"
        main(["run", "--config", str(path), "--seed", "77", "--out", str(out)])
        capsys.readouterr()
        report = json.loads((out / "report.json").read_text())
        assert report["config"]["seed"] == 77

    def test_unknown_scenario(self, capsys, clean_env):
        assert main(["run", "--scenario", "nope", "--seed", "1"]) == EXIT_ERROR
        assert _envelope(capsys)["error"] == "unknown_scenario"

    def test_scenario_flag_must_agree_with_config(self, capsys, clean_env, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text('scenario = "appendix-lemmas"\nseed = 1\n')
        status = main(["run", "--config", str(path), "--scenario", "prop1-counterexample"])
        assert status == EXIT_ERROR
        assert _envelope(capsys)["details"]["field"] == "scenario"

    def test_missing_seed(self, capsys, clean_env):
        assert main(["run", "--scenario", "prop1-counterexample"]) == EXIT_ERROR
        assert _envelope(capsys)["details"]["field"] == "seed"
