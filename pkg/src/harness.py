"""
Scenario registry, config normalization and the report writer.

A scenario is a registry entry (name, category, description, option blocks
it reads, defaults, runtime budget, handler). `run_scenario` executes one
normalized config and writes report.json, metrics.csv and whatever tables
the handler produced into the config's output directory.
"""

import json
import os
import time
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import pandas as pd

from config import SCHEMA_VERSION, logger, package_version
from env_config import default_out_dir, resolve_config_path
from identify.align import AlignOptions
from identify.diversity import DiversityOptions
from identify.embedding import EmbeddingOptions
from identify.env_core import EnvironmentOptions
from identify.estimator import HyperParams
from identify.nmf_minvol import SolverOptions
from scenarios.continuous_scenarios import SCENARIOS as _CONTINUOUS_SCENARIOS
from scenarios.estimator_scenarios import SCENARIOS as _ESTIMATOR_SCENARIOS
from scenarios.finite_scenarios import SCENARIOS as _FINITE_SCENARIOS
from schemas import (
    BLOCK_SCHEMAS,
    SEED_SCHEMA,
    coerce_numbers,
    error_field,
    first_error,
    scenario_schema,
)
from utils.errors import (
    INTERNAL_ERROR,
    INVALID_CONFIG,
    UNKNOWN_SCENARIO,
    LatentActError,
)
from utils.formatting import to_jsonable, write_json

ALL_SCENARIOS = _FINITE_SCENARIOS + _CONTINUOUS_SCENARIOS + _ESTIMATOR_SCENARIOS
SCENARIO_BY_NAME: dict = {}
for _scenario in ALL_SCENARIOS:
    if _scenario["name"] in SCENARIO_BY_NAME:
        raise RuntimeError(f"Duplicate scenario name: {_scenario['name']}")
    SCENARIO_BY_NAME[_scenario["name"]] = _scenario

# config block name -> options dataclass
BLOCKS = {
    "environment": EnvironmentOptions,
    "solver": SolverOptions,
    "diversity": DiversityOptions,
    "embedding": EmbeddingOptions,
    "align": AlignOptions,
    "estimator": HyperParams,
}

# scenario name -> strict document schema
SCHEMA_BY_NAME = {s["name"]: scenario_schema(s) for s in ALL_SCENARIOS}


def list_scenarios() -> list[dict]:
    return [
        {
            "name": s["name"],
            "category": s["category"],
            "description": s["description"],
            "blocks": list(s["blocks"]),
            "budget_s": s["budget_s"],
        }
        for s in ALL_SCENARIOS
    ]


# ── config ──────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str
    seed: int
    out_dir: str
    environment: EnvironmentOptions = field(default_factory=EnvironmentOptions)
    solver: SolverOptions = field(default_factory=SolverOptions)
    diversity: DiversityOptions = field(default_factory=DiversityOptions)
    embedding: EmbeddingOptions = field(default_factory=EmbeddingOptions)
    align: AlignOptions = field(default_factory=AlignOptions)
    estimator: HyperParams = field(default_factory=HyperParams)
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        """Normalized echo; only the blocks the scenario reads are included,
        so the echo validates back to the same config."""
        entry = SCENARIO_BY_NAME[self.scenario]
        out = {"scenario": self.scenario, "seed": self.seed, "out_dir": self.out_dir}
        for name in entry["blocks"]:
            out[name] = asdict(getattr(self, name))
        if self.params:
            out["params"] = dict(self.params)
        return to_jsonable(out)


def _build_block(name: str, values: dict) -> object:
    try:
        return BLOCKS[name](**coerce_numbers(values, BLOCK_SCHEMAS[name]))
    except LatentActError as e:
        raise LatentActError(
            INVALID_CONFIG, f"[{name}] {e.message}", field=name, cause=e.code
        ) from e


def _merged_document(raw: dict, entry: dict) -> dict:
    """User document with registry defaults filled in under every table it reads."""
    defaults = entry["defaults"]
    document = dict(raw)
    for name in (*entry["blocks"], "params"):
        user = raw.get(name, {})
        document[name] = {**defaults.get(name, {}), **user} if isinstance(user, dict) else user
    return document


def normalize_config(raw: dict) -> ScenarioConfig:
    """Registry defaults first, then user values, checked against the
    scenario's strict schema before any option object is built."""
    if not isinstance(raw, dict):
        raise LatentActError(INVALID_CONFIG, "config must be a table")
    name = raw.get("scenario")
    if name not in SCENARIO_BY_NAME:
        raise LatentActError(
            UNKNOWN_SCENARIO,
            f"unknown scenario {name!r}; registered: {sorted(SCENARIO_BY_NAME)}",
            registered=sorted(SCENARIO_BY_NAME),
        )
    entry = SCENARIO_BY_NAME[name]
    document = _merged_document(raw, entry)
    error = first_error(document, SCHEMA_BY_NAME[name])
    if error is not None:
        where = error_field(error)
        raise LatentActError(
            INVALID_CONFIG, f"{where or 'config'}: {error.message}", field=where
        )

    out_dir = document.get("out_dir") or os.path.join(default_out_dir(), name)
    blocks = {block: _build_block(block, document[block]) for block in entry["blocks"]}
    params = coerce_numbers(document["params"], entry["schema"])
    return ScenarioConfig(
        scenario=name, seed=document["seed"], out_dir=out_dir, params=params, **blocks
    )


def load_config_file(path: str) -> dict:
    """Parse TOML (default) or JSON (by extension) with line context on errors."""
    resolved = Path(resolve_config_path(path))
    try:
        text = resolved.read_text()
    except OSError as e:
        raise LatentActError(INVALID_CONFIG, f"cannot read config {path}: {e.strerror}") from e
    if resolved.suffix == ".json":
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise LatentActError(
                INVALID_CONFIG,
                f"{resolved}: {e.msg} (line {e.lineno}, column {e.colno})",
                line=e.lineno,
                column=e.colno,
            ) from e
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise LatentActError(INVALID_CONFIG, f"{resolved}: {e}") from e


def validate_config(path: str) -> ScenarioConfig:
    return normalize_config(load_config_file(path))


# ── running ─────────────────────────────────────────────────────────────────


@dataclass
class ScenarioReport:
    scenario: str
    config: dict
    metrics: dict
    checks: dict
    passed: bool
    per_state: list = field(default_factory=list)
    details: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0
    budget_s: float | None = None
    artifacts: list = field(default_factory=list)

    def to_dict(self, include_timing: bool = True) -> dict:
        out = {
            "schema_version": SCHEMA_VERSION,
            "version": package_version(),
            "scenario": self.scenario,
            "config": self.config,
            "metrics": self.metrics,
            "checks": self.checks,
            "passed": self.passed,
            "per_state": self.per_state,
            "details": self.details,
        }
        if include_timing:
            # never gates pass/fail
            out["timing"] = {
                "wall_clock_s": self.wall_clock_s,
                "budget_s": self.budget_s,
                "within_budget": self.budget_s is None or self.wall_clock_s <= self.budget_s,
            }
        return out

    def summary(self) -> dict:
        return {
            "scenario": self.scenario,
            "passed": self.passed,
            "checks": {name: c["passed"] for name, c in self.checks.items()},
            "out_dir": self.config["out_dir"],
            "wall_clock_s": self.wall_clock_s,
        }


def _flatten(metrics: dict, prefix: str = "") -> list[dict]:
    rows = []
    for key, value in metrics.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            rows.extend(_flatten(value, f"{name}."))
        elif isinstance(value, list):
            rows.append({"metric": name, "value": json.dumps(to_jsonable(value))})
        else:
            rows.append({"metric": name, "value": to_jsonable(value)})
    return rows


def _write_artifacts(report: ScenarioReport, outcome, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(_flatten(report.metrics), columns=["metric", "value"]).to_csv(
        out_dir / "metrics.csv", index=False
    )
    report.artifacts.append("metrics.csv")
    if report.per_state:
        pd.DataFrame(to_jsonable(report.per_state)).to_csv(out_dir / "per_state.csv", index=False)
        report.artifacts.append("per_state.csv")
    if outcome.trace is not None:
        outcome.trace.to_csv(out_dir / "trace.csv", index=False)
        report.artifacts.append("trace.csv")
    for name, frame in sorted(outcome.tables.items()):
        frame.to_csv(out_dir / name, index=False)
        report.artifacts.append(name)
    report.artifacts.append("report.json")
    write_json(out_dir / "report.json", report.to_dict())


def run_scenario(config: ScenarioConfig, write: bool = True) -> ScenarioReport:
    """Execute one scenario; pass/fail is the conjunction of its recorded checks."""
    entry = SCENARIO_BY_NAME.get(config.scenario)
    if entry is None:
        logger.error(f"Unknown scenario requested: {config.scenario}")
        raise LatentActError(
            UNKNOWN_SCENARIO,
            f"unknown scenario {config.scenario!r}; registered: {sorted(SCENARIO_BY_NAME)}",
        )
    logger.info(f"running {config.scenario} (seed={config.seed}) -> {config.out_dir}")
    start = time.perf_counter()
    try:
        outcome = entry["handler"](config)
    except LatentActError:
        raise
    except Exception as e:
        logger.error(f"Error executing scenario {config.scenario}: {e}", exc_info=True)
        raise LatentActError(
            INTERNAL_ERROR, f"Scenario execution failed: {e!s}", scenario=config.scenario
        ) from e
    elapsed = time.perf_counter() - start

    checks = to_jsonable(outcome.checks)
    report = ScenarioReport(
        scenario=config.scenario,
        config=config.to_dict(),
        metrics=to_jsonable(outcome.metrics),
        checks=checks,
        passed=all(c["passed"] for c in checks.values()),
        per_state=to_jsonable(outcome.per_state),
        details=to_jsonable(outcome.details),
        wall_clock_s=elapsed,
        budget_s=entry["budget_s"],
    )
    if elapsed > entry["budget_s"]:
        logger.warning(
            f"{config.scenario} took {elapsed:.1f}s, over its {entry['budget_s']:.0f}s budget"
        )
    if write:
        _write_artifacts(report, outcome, Path(config.out_dir))
    failed = [name for name, c in checks.items() if not c["passed"]]
    if failed:
        logger.warning(f"{config.scenario} failed checks: {failed}")
    else:
        logger.info(f"{config.scenario} passed all {len(checks)} checks in {elapsed:.2f}s")
    return report


def with_overrides(config: ScenarioConfig, seed: int | None = None, out_dir: str | None = None):
    """Config with CLI-level seed/out_dir applied."""
    if seed is not None:
        error = first_error(seed, SEED_SCHEMA)
        if error is not None:
            raise LatentActError(INVALID_CONFIG, f"seed: {error.message}", field="seed")
        config = replace(config, seed=seed)
    if out_dir is not None:
        config = replace(config, out_dir=out_dir)
    return config
