import json
import math
from dataclasses import asdict, is_dataclass
from pathlib import Path

import numpy as np


def format_success_response(data: dict) -> str:
    """Format a successful response."""
    result = {"success": True, **data}
    return dumps(result)


def format_error_response(error_code: str, message: str, details=None) -> str:
    """Format an error response."""
    result = {"success": False, "error": error_code, "message": message}
    if details:
        result["details"] = details
    return dumps(result)


# ── JSON conversion ─────────────────────────────────────────────────────────


def to_jsonable(value):
    """Recursively turn numpy arrays/scalars, dataclasses, tuples and
    non-finite floats into plain JSON values. Non-finite floats become the
    strings "inf", "-inf" and "nan" so the output stays strict JSON."""
    if is_dataclass(value) and not isinstance(value, type):
        if hasattr(value, "to_dict"):
            return to_jsonable(value.to_dict())
        return to_jsonable(asdict(value))
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    return value


def dumps(value) -> str:
    """Deterministic JSON text: sorted keys, two-space indent."""
    return json.dumps(to_jsonable(value), indent=2, sort_keys=True)


def write_json(path: str | Path, value) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(value) + "\n")
    return path
