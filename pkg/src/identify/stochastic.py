"""
Column-stochastic matrices: validation, simplex projection and sampling.

Every carrier of distributions in the toolkit (P_o, T_o, Pi_o, dictionary
coordinates) is a nonnegative matrix whose columns sum to one.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from config import NEGATIVE_CLAMP, STOCHASTIC_ATOL
from utils.errors import NOT_STOCHASTIC, LatentActError


@dataclass(frozen=True)
class StochasticMatrix:
    """Validated column-stochastic matrix (rows x cols)."""

    values: np.ndarray
    atol: float = STOCHASTIC_ATOL

    def __post_init__(self):
        object.__setattr__(self, "values", as_stochastic(self.values, self.atol))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def to_dict(self) -> dict:
        # column-major: one list per column
        return {"rows": self.rows, "cols": self.cols, "columns": self.values.T.tolist()}

    @classmethod
    def from_columns(cls, columns, atol: float = STOCHASTIC_ATOL):
        return cls(np.asarray(columns, dtype=float).T, atol)


class Factorization(NamedTuple):
    T: np.ndarray
    Pi: np.ndarray


def as_array(M) -> np.ndarray:
    if isinstance(M, StochasticMatrix):
        return M.values
    return np.asarray(M, dtype=float)


def clamp_negatives(M: np.ndarray) -> np.ndarray:
    """Zero out round-off negatives in [-NEGATIVE_CLAMP, 0)."""
    M = np.array(M, dtype=float)
    M[(M < 0) & (M >= -NEGATIVE_CLAMP)] = 0.0
    return M


def column_deviation(M) -> float:
    """Max |column sum - 1|."""
    M = as_array(M)
    if M.size == 0:
        return 0.0
    return float(np.max(np.abs(M.sum(axis=0) - 1.0)))


def is_stochastic(M, atol: float = STOCHASTIC_ATOL) -> bool:
    M = clamp_negatives(as_array(M))
    return M.ndim == 2 and bool(np.all(M >= 0)) and column_deviation(M) <= atol


def as_stochastic(M, atol: float = STOCHASTIC_ATOL, name: str = "matrix") -> np.ndarray:
    """Validate and return a clamped float copy of a column-stochastic matrix."""
    M = as_array(M)
    if M.ndim == 1:
        M = M[:, None]
    if M.ndim != 2:
        raise LatentActError(NOT_STOCHASTIC, f"{name} must be 2-D, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise LatentActError(NOT_STOCHASTIC, f"{name} has non-finite entries")
    M = clamp_negatives(M)
    most_negative = float(M.min()) if M.size else 0.0
    if most_negative < 0:
        raise LatentActError(
            NOT_STOCHASTIC,
            f"{name} has negative entries (min {most_negative:.3e})",
            min_entry=most_negative,
        )
    deviation = column_deviation(M)
    if deviation > atol:
        raise LatentActError(
            NOT_STOCHASTIC,
            f"{name} columns do not sum to 1 (max deviation {deviation:.3e})",
            max_column_deviation=deviation,
        )
    return M


def project_simplex(V: np.ndarray) -> np.ndarray:
    """Euclidean projection of every column of V onto the probability simplex."""
    V = np.asarray(V, dtype=float)
    squeeze = V.ndim == 1
    if squeeze:
        V = V[:, None]
    n = V.shape[0]
    U = -np.sort(-V, axis=0)
    css = np.cumsum(U, axis=0) - 1.0
    ind = np.arange(1, n + 1)[:, None]
    cond = U - css / ind > 0
    rho = n - 1 - np.argmax(cond[::-1], axis=0)
    theta = css[rho, np.arange(V.shape[1])] / (rho + 1)
    X = np.maximum(V - theta, 0.0)
    return X[:, 0] if squeeze else X


def normalize_columns(M: np.ndarray) -> np.ndarray:
    """Clip to >= 0 and rescale columns to sum 1; all-zero columns become uniform."""
    M = np.maximum(np.asarray(M, dtype=float), 0.0)
    sums = M.sum(axis=0)
    out = np.empty_like(M)
    zero = sums <= 0
    out[:, ~zero] = M[:, ~zero] / sums[~zero]
    out[:, zero] = 1.0 / M.shape[0]
    return out


def random_stochastic(rng: np.random.Generator, rows: int, cols: int, concentration=1.0):
    """Columns drawn i.i.d. from a symmetric Dirichlet."""
    return rng.dirichlet(np.full(rows, float(concentration)), size=cols).T


def tv_columns(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Total-variation distance between matching columns."""
    return 0.5 * np.abs(np.asarray(A) - np.asarray(B)).sum(axis=0)
