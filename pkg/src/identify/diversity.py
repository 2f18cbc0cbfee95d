"""
Audits of the identifiability preconditions on (P, Pi).

The verdict combines a sufficient check (separability: a near-pure column for
every action) with a necessary Monte-Carlo check (boundary points of the
second-order cone lie in cone(Pi)). Neither certifies the scattered
condition exactly.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from config import ESTIMATED_CONE_TOL, EXACT_CONE_TOL, logger
from utils.errors import DIMENSION_MISMATCH, INVALID_PARAMS, LatentActError
from utils.rng import stream

from .nmf_minvol import numerical_rank
from .stochastic import as_array

VERDICTS = ("certified-sufficient", "plausible", "violated", "inconclusive")


@dataclass(frozen=True)
class DiversityOptions:
    rank_tol: float = 1e-9
    separability_tol: float = 1e-6
    cone_tol: float = EXACT_CONE_TOL
    # used instead of cone_tol when the audited Pi is itself an estimate
    estimated_cone_tol: float = ESTIMATED_CONE_TOL
    mc_samples: int = 2000
    seed: int = 0

    def __post_init__(self):
        if not self.rank_tol > 0:
            raise LatentActError(INVALID_PARAMS, "rank_tol must be > 0")
        if not 0 < self.separability_tol < 0.5:
            raise LatentActError(INVALID_PARAMS, "separability_tol must lie in (0, 0.5)")
        if not (self.cone_tol > 0 and self.estimated_cone_tol > 0):
            raise LatentActError(INVALID_PARAMS, "cone tolerances must be > 0")
        if self.mc_samples < 1:
            raise LatentActError(INVALID_PARAMS, "mc_samples must be >= 1")


@dataclass
class DiversityReport:
    rank_P: int
    rank_Pi: int
    separable: bool
    mc_pass_rate: float
    verdict: str
    tolerances: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "rank_P": self.rank_P,
            "rank_Pi": self.rank_Pi,
            "separable": self.separable,
            "mc_pass_rate": self.mc_pass_rate,
            "verdict": self.verdict,
            "tolerances": dict(self.tolerances),
        }


def check_rank(M, k: int, tol: float = 1e-9) -> tuple[int, bool]:
    M = as_array(M)
    if M.size == 0:
        raise LatentActError(INVALID_PARAMS, "check_rank got an empty matrix")
    if not tol > 0:
        raise LatentActError(INVALID_PARAMS, f"tol must be > 0, got {tol}")
    rank = numerical_rank(M, tol)
    return rank, rank >= k


def check_separability(Pi, tol: float = 1e-6) -> bool:
    """True iff every unit vector e_a has a column of Pi within max-abs tol."""
    if not 0 < tol < 0.5:
        raise LatentActError(INVALID_PARAMS, f"tol must lie in (0, 0.5), got {tol}")
    Pi = as_array(Pi)
    k = Pi.shape[0]
    # distance[a, j] = max-abs gap between column j and e_a
    distance = np.max(np.abs(Pi[None, :, :] - np.eye(k)[:, :, None]), axis=1)
    return bool(np.all(distance.min(axis=1) <= tol))


def cone_boundary_points(k: int, num_samples: int, seed: int) -> np.ndarray:
    """Uniform directions on the boundary of {x : 1^T x >= sqrt(k-1) |x|},
    unit norm, one per column."""
    rng = stream(seed, "mc_scattered_check", k)
    ones = np.ones(k) / np.sqrt(k)
    w = rng.standard_normal((k, num_samples))
    w -= np.outer(ones, ones @ w)
    w /= np.linalg.norm(w, axis=0, keepdims=True) * np.sqrt(k)
    return np.sqrt((k - 1) / k) * ones[:, None] + w


def mc_scattered_check(Pi, num_samples: int, seed: int, tol: float = EXACT_CONE_TOL) -> float:
    """Fraction of sampled cone-boundary points lying in cone(columns of Pi)."""
    Pi = as_array(Pi)
    if num_samples < 1:
        raise LatentActError(INVALID_PARAMS, "num_samples must be >= 1")
    k = Pi.shape[0]
    if k == 1:
        return 1.0
    X = cone_boundary_points(k, num_samples, seed)
    passed = 0
    for j in range(num_samples):
        _, residual = nnls(Pi, X[:, j])
        passed += residual <= tol
    return passed / num_samples


def diversity_report(
    P, Pi, k: int, opts: DiversityOptions = DiversityOptions(), estimated: bool = False
) -> DiversityReport:
    """Rank, separability and Monte-Carlo cone verdict for (P, Pi). Pass
    estimated=True when Pi comes from data or a solver rather than the truth;
    the cone test then runs at opts.estimated_cone_tol."""
    P = as_array(P)
    Pi = as_array(Pi)
    if Pi.shape[0] != k:
        raise LatentActError(DIMENSION_MISMATCH, f"Pi has {Pi.shape[0]} rows, k = {k}")
    if P.shape[1] != Pi.shape[1]:
        raise LatentActError(
            DIMENSION_MISMATCH, f"P has {P.shape[1]} columns, Pi has {Pi.shape[1]}"
        )
    rank_P, ok_P = check_rank(P, k, opts.rank_tol)
    rank_Pi, ok_Pi = check_rank(Pi, k, opts.rank_tol)
    separable = check_separability(Pi, opts.separability_tol)
    cone_tol = opts.estimated_cone_tol if estimated else opts.cone_tol
    pass_rate = mc_scattered_check(Pi, opts.mc_samples, opts.seed, cone_tol)
    if not (ok_P and ok_Pi):
        verdict = "violated"
    elif separable:
        verdict = "certified-sufficient"
    elif pass_rate == 1.0:
        verdict = "plausible"
    else:
        verdict = "inconclusive"
    logger.debug(
        f"diversity: rank_P={rank_P} rank_Pi={rank_Pi} separable={separable} "
        f"mc_pass_rate={pass_rate:.4f} -> {verdict}"
    )
    return DiversityReport(
        rank_P=rank_P,
        rank_Pi=rank_Pi,
        separable=separable,
        mc_pass_rate=float(pass_rate),
        verdict=verdict,
        tolerances={
            "rank_tol": opts.rank_tol,
            "separability_tol": opts.separability_tol,
            "cone_tol": cone_tol,
            "estimated": estimated,
        },
    )
