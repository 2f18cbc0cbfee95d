"""
JSON Schemas for scenario config files.

One schema per option block, plus the `params` schema each scenario entry
declares next to its defaults. `scenario_schema` assembles the document schema
for one scenario and `strict` closes every object in it, so a misspelled key
is an error naming the key instead of a silent fallback to the default.
Value ranges stay in the option dataclasses; the schemas fix shape and type.
"""

import copy

from jsonschema import Draft202012Validator
from jsonschema.exceptions import ValidationError, best_match

MAX_SEED = 2**64 - 1
SEED_SCHEMA = {"type": "integer", "minimum": 0, "maximum": MAX_SEED}

_INT = {"type": "integer"}
_NUM = {"type": "number"}
_BOOL = {"type": "boolean"}
_STR = {"type": "string"}
_OPT_INT = {"type": ["integer", "null"]}
_OPT_NUM = {"type": ["number", "null"]}
_OPT_STR = {"type": ["string", "null"]}

BLOCK_SCHEMAS = {
    "environment": {
        "properties": {
            "kind": {"enum": ["random_finite", "smooth_path", "collapse", "file"]},
            "n": _INT,
            "k": _INT,
            "m": _INT,
            "num_states": _INT,
            "separable": _BOOL,
            "num_nodes": _INT,
            "dim": _INT,
            "var": _NUM,
            "path": _OPT_STR,
        },
    },
    "solver": {
        "properties": {
            "k": _INT,
            "restarts": _INT,
            "max_iters": _INT,
            "rho0": _NUM,
            "rho_growth": _NUM,
            "rho_max": _NUM,
            "eps_det": _NUM,
            "projection_tol": _NUM,
            "tol": _OPT_NUM,
            "inner_iters": _INT,
            "polish_iters": _INT,
            "rank_tol": _NUM,
            "reduce_rank": _BOOL,
            "seed": _INT,
        },
    },
    "diversity": {
        "properties": {
            "rank_tol": _NUM,
            "separability_tol": _NUM,
            "cone_tol": _NUM,
            "estimated_cone_tol": _NUM,
            "mc_samples": _INT,
            "seed": _INT,
        },
    },
    "embedding": {
        "properties": {
            "kernel": {"enum": ["gaussian", "finite_delta"]},
            "bandwidth": _OPT_NUM,
            "mc_samples": _INT,
            "mc_pairs": _INT,
            "rank_tol": _NUM,
        },
    },
    "align": {
        "properties": {
            "root": _OPT_INT,
            "graph": {"enum": ["path", "knn"]},
            "n_neighbors": _INT,
            "num_anchors": _INT,
            "split_after": _OPT_INT,
            "shuffle": _BOOL,
        },
    },
    "estimator": {
        "properties": {
            "k": _INT,
            "lambda_vol": _NUM,
            "lambda_pol": _NUM,
            "lambda_anchor": _NUM,
            "eps": _NUM,
            "tau": _OPT_NUM,
            "step_size": _NUM,
            "max_iters": _INT,
            "tol": _NUM,
            "backtrack": _NUM,
            "max_backtracks": _INT,
            "seed": _INT,
            "kernel": {"enum": ["finite_delta", "gaussian"]},
            "bandwidth": _OPT_NUM,
            "deterministic_gram": _BOOL,
            "init": {"enum": ["marginal"]},
            "init_noise": _NUM,
            "freeze_theta": _BOOL,
            "freeze_psi": _BOOL,
        },
    },
}


def strict(schema: dict) -> dict:
    """Copy of the schema in which every object rejects keys it does not declare.

    Applied centrally so a new block or scenario cannot forget it, and so no
    registry schema is mutated in place.
    """
    schema = copy.deepcopy(schema)
    _close(schema)
    return schema


def _close(schema: dict) -> None:
    if "properties" in schema:
        schema.setdefault("type", "object")
        schema["additionalProperties"] = False
        for sub in schema["properties"].values():
            _close(sub)


def scenario_schema(entry: dict) -> dict:
    """Document schema for one registry entry: only the blocks it reads."""
    properties = {
        "scenario": {"const": entry["name"]},
        "seed": SEED_SCHEMA,
        "out_dir": _STR,
        "params": entry.get("schema", {"properties": {}}),
    }
    for name in entry["blocks"]:
        properties[name] = BLOCK_SCHEMAS[name]
    return strict({"properties": properties, "required": ["scenario", "seed"]})


def first_error(document, schema: dict) -> ValidationError | None:
    """The most relevant violation, or None when the document conforms."""
    return best_match(Draft202012Validator(schema).iter_errors(document))


def error_field(error: ValidationError) -> str:
    """Dotted path of the offending key, naming the key itself for unknown or
    missing properties rather than the object that holds it."""
    path = [str(p) for p in error.absolute_path]
    if error.validator == "additionalProperties" and isinstance(error.instance, dict):
        declared = error.schema.get("properties", {})
        path.append(sorted(k for k in error.instance if k not in declared)[0])
    elif error.validator == "required" and isinstance(error.instance, dict):
        path.append(next(k for k in error.validator_value if k not in error.instance))
    return ".".join(path)


def coerce_numbers(values: dict, schema: dict) -> dict:
    """int -> float for number fields and integral float -> int for integer
    fields, so a TOML `tol = 1` lands as the float the dataclass declares."""
    out = dict(values)
    for key, value in values.items():
        declared = schema["properties"].get(key, {}).get("type")
        kinds = declared if isinstance(declared, list) else [declared]
        if isinstance(value, bool):
            continue
        if "number" in kinds and isinstance(value, int):
            out[key] = float(value)
        elif "integer" in kinds and isinstance(value, float):
            out[key] = int(value)
    return out
