"""Registry invariants: shape, categories, uniqueness, block names, schemas."""

from dataclasses import fields

import pytest

from harness import (
    ALL_SCENARIOS,
    BLOCKS,
    SCENARIO_BY_NAME,
    SCHEMA_BY_NAME,
    list_scenarios,
    normalize_config,
)
from schemas import BLOCK_SCHEMAS, strict
ALLOWED_CATEGORIES = {"finite", "continuous", "estimator"}

EXPECTED_SCENARIOS = {
    "prop1-counterexample",
    "finite-recovery",
    "diversity-audit",
    "appendix-lemmas",
    "continuous-recovery",
    "global-alignment",
    "estimator-fit",
}


def test_every_entry_well_formed():
    for scenario in ALL_SCENARIOS:
        assert isinstance(scenario.get("name"), str) and scenario["name"], scenario
        assert isinstance(scenario.get("description"), str) and scenario["description"], scenario[
            "name"
        ]
        assert isinstance(scenario.get("defaults"), dict), scenario["name"]
        assert callable(scenario.get("handler")), scenario["name"]
        assert scenario.get("budget_s", 0) > 0, scenario["name"]


def test_categories_in_allowlist():
    for scenario in ALL_SCENARIOS:
        assert (
            scenario["category"] in ALLOWED_CATEGORIES
        ), f"{scenario['name']}: unknown category {scenario['category']!r}"


def test_no_duplicate_names():
    names = [scenario["name"] for scenario in ALL_SCENARIOS]
    assert len(names) == len(set(names)), "duplicate scenario names detected"


def test_registered_names():
    assert set(SCENARIO_BY_NAME) == EXPECTED_SCENARIOS


def test_blocks_are_known_option_blocks():
    for scenario in ALL_SCENARIOS:
        unknown = set(scenario["blocks"]) - set(BLOCKS)
        assert not unknown, f"{scenario['name']}: unknown blocks {unknown}"
        defaulted = set(scenario["defaults"]) - {"params"}
        assert defaulted <= set(scenario["blocks"]), scenario["name"]


@pytest.mark.parametrize("name", sorted(EXPECTED_SCENARIOS))
def test_defaults_normalize(name, tmp_path):
    config = normalize_config({"scenario": name, "seed": 0, "out_dir": str(tmp_path)})
    assert config.params == SCENARIO_BY_NAME[name]["defaults"].get("params", {})


def test_listing_matches_registry():
    listed = list_scenarios()
    assert [s["name"] for s in listed] == [s["name"] for s in ALL_SCENARIOS]
    assert all("handler" not in s for s in listed)


# ── schemas ─────────────────────────────────────────────────────────────────


def _objects(schema: dict):
    if "properties" in schema:
        yield schema
        for sub in schema["properties"].values():
            yield from _objects(sub)


def test_every_document_schema_is_closed():
    for name, schema in SCHEMA_BY_NAME.items():
        open_objects = [o for o in _objects(schema) if o.get("additionalProperties") is not False]
        assert not open_objects, f"{name}: schema accepts undeclared keys"


def test_block_schemas_cover_option_fields():
    assert set(BLOCK_SCHEMAS) == set(BLOCKS)
    for name, cls in BLOCKS.items():
        declared = set(BLOCK_SCHEMAS[name]["properties"])
        assert declared == {f.name for f in fields(cls)}, name


def test_params_schema_matches_defaults():
    for scenario in ALL_SCENARIOS:
        declared = set(scenario["schema"]["properties"])
        assert declared == set(scenario["defaults"].get("params", {})), scenario["name"]


def test_strict_does_not_mutate_the_registry_schema():
    original = {"properties": {"inner": {"properties": {"a": {"type": "integer"}}}}}
    closed = strict(original)
    assert closed["additionalProperties"] is False
    assert closed["properties"]["inner"]["additionalProperties"] is False
    assert "additionalProperties" not in original
    assert "additionalProperties" not in original["properties"]["inner"]


def test_schema_only_opens_blocks_the_scenario_reads():
    for scenario in ALL_SCENARIOS:
        top = set(SCHEMA_BY_NAME[scenario["name"]]["properties"])
        assert top == {"scenario", "seed", "out_dir", "params", *scenario["blocks"]}
