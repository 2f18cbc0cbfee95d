"""Pieces every scenario handler returns or uses."""

import operator
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from utils.errors import INVALID_PARAMS, LatentActError

_OPS = {
    "<=": operator.le,
    "<": operator.lt,
    ">=": operator.ge,
    ">": operator.gt,
    "==": operator.eq,
}


def check(value, threshold, op: str) -> dict:
    """Pass/fail record for one recorded number against its threshold."""
    if op not in _OPS:
        raise LatentActError(INVALID_PARAMS, f"unknown comparison {op!r}")
    value = value.item() if isinstance(value, np.generic) else value
    passed = bool(np.isfinite(value)) and bool(_OPS[op](value, threshold))
    return {"value": value, "threshold": threshold, "op": op, "passed": passed}


@dataclass
class ScenarioOutcome:
    metrics: dict
    checks: dict
    per_state: list = field(default_factory=list)
    # extra JSON sections, e.g. the alignment assignment
    details: dict = field(default_factory=dict)
    trace: pd.DataFrame | None = None
    # file name -> frame written as CSV next to report.json
    tables: dict = field(default_factory=dict)
