"""
Minimum-volume column-stochastic factorization P = T Pi.

The solver targets: min det(T^T K T) over column-stochastic T (n x k) and
Pi (k x m) with P = T Pi, where K is the identity for finite observation
spaces and a dictionary Gram matrix for the embedded (continuous) variant.

Scheme per restart:
  1. SPA picks k columns of P (in the K-geometry) as the initial T.
  2. Alternating projected-gradient steps on
         log det(T^T K T + eps I) + rho * ||P - T Pi||_F^2
     with per-column simplex projections and geometric rho growth.
  3. Fit-only polish, then Pi = argmin ||P - T Pi|| over simplex columns.
The SPA columns themselves are kept as a candidate. Among candidates with
residual <= tol the least volume wins; ties go to the smaller residual, then
the lower candidate index.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment, nnls

from config import (
    EXACT_FEASIBILITY_TOL,
    MAX_PERMUTATION_K,
    NEGATIVE_CLAMP,
    logger,
)
from utils.errors import (
    DEGENERATE,
    DIMENSION_MISMATCH,
    INFEASIBLE,
    INVALID_PARAMS,
    RANK_DEFICIENT,
    LatentActError,
)
from utils.rng import stream

from .stochastic import (
    as_array,
    as_stochastic,
    normalize_columns,
    project_simplex,
    random_stochastic,
)

# Objectives within this relative gap count as tied across candidates.
_OBJECTIVE_TIE_RTOL = 1e-9


@dataclass(frozen=True)
class SolverOptions:
    k: int = 3
    restarts: int = 2
    max_iters: int = 400
    rho0: float = 1e3
    rho_growth: float = 1.07
    rho_max: float = 1e10
    eps_det: float = 1e-12
    projection_tol: float = 1e-12
    tol: float | None = None
    inner_iters: int = 3
    polish_iters: int = 25
    rank_tol: float = 1e-9
    reduce_rank: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise LatentActError(INVALID_PARAMS, f"k must be >= 1, got {self.k}")
        if self.restarts < 1:
            raise LatentActError(
                INVALID_PARAMS, f"restarts must be >= 1, got {self.restarts}"
            )
        if self.eps_det <= 0:
            raise LatentActError(
                INVALID_PARAMS, f"eps_det must be > 0, got {self.eps_det}"
            )
        if self.max_iters < 0 or self.inner_iters < 1 or self.polish_iters < 0:
            raise LatentActError(INVALID_PARAMS, "iteration counts must be >= 0")
        if self.rho0 <= 0 or self.rho_growth < 1 or self.rho_max < self.rho0:
            raise LatentActError(
                INVALID_PARAMS,
                "penalty schedule needs rho0 > 0, rho_growth >= 1, rho_max >= rho0",
            )
        if self.tol is not None and self.tol <= 0:
            raise LatentActError(INVALID_PARAMS, f"tol must be > 0, got {self.tol}")

    @property
    def feasibility_tol(self) -> float:
        return EXACT_FEASIBILITY_TOL if self.tol is None else self.tol


@dataclass
class FactorizationResult:
    T: np.ndarray
    Pi: np.ndarray
    objective: float
    residual: float
    effective_rank: int
    restarts_used: int
    converged: bool
    k: int
    tol: float
    requested_k: int = 0
    reduced: bool = False
    # fit to the rank-reduced P the solver worked on; equals residual when not reduced
    reduced_residual: float | None = None
    chosen: str = "spa"
    candidates: list = field(default_factory=list)

    def to_dict(self, include_factors: bool = True) -> dict:
        out = {
            "objective": self.objective,
            "residual": self.residual,
            "effective_rank": self.effective_rank,
            "restarts_used": self.restarts_used,
            "converged": self.converged,
            "k": self.k,
            "requested_k": self.requested_k or self.k,
            "reduced": self.reduced,
            "reduced_residual": self.reduced_residual,
            "tol": self.tol,
            "chosen": self.chosen,
        }
        if include_factors:
            out["T"] = self.T.T.tolist()
            out["Pi"] = self.Pi.T.tolist()
        return out


# ── linear-algebra helpers ──────────────────────────────────────────────────


def numerical_rank(M, tol: float = 1e-9) -> int:
    """Singular values above tol * largest."""
    M = as_array(M)
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] <= 0:
        return 0
    return int(np.sum(s > tol * s[0]))


def _embedding_factor(gram) -> np.ndarray | None:
    """R with R^T R = K, or None for the identity geometry."""
    if gram is None:
        return None
    gram = np.asarray(gram, dtype=float)
    if np.array_equal(gram, np.eye(gram.shape[0])):
        return None
    w, V = np.linalg.eigh(0.5 * (gram + gram.T))
    return np.sqrt(np.maximum(w, 0.0))[:, None] * V.T


def _gram_of(T: np.ndarray, gram) -> np.ndarray:
    if gram is None:
        return T.T @ T
    return T.T @ (gram @ T)


def det_volume(T, gram=None) -> float:
    """det(T^T T) (or det(T^T K T)), the squared volume of the columns of T;
    round-off negatives clamp to 0."""
    T = as_array(T)
    value = float(np.linalg.det(_gram_of(T, gram)))
    return max(value, 0.0)


def _log_volume(T: np.ndarray, gram, eps: float) -> float:
    sign, logdet = np.linalg.slogdet(_gram_of(T, gram) + eps * np.eye(T.shape[1]))
    return logdet if sign > 0 else -np.inf


def fit_weights(T: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Column-wise min ||p - T pi|| over the simplex, via NNLS with a
    sum-to-one row, then renormalized."""
    n, k = T.shape
    weight = 10.0
    A = np.vstack([T, weight * np.ones((1, k))])
    Pi = np.empty((k, P.shape[1]))
    for j in range(P.shape[1]):
        b = np.append(P[:, j], weight)
        x, _ = nnls(A, b)
        Pi[:, j] = x
    return normalize_columns(Pi)


def _residual(P, T, Pi) -> float:
    return float(np.linalg.norm(P - T @ Pi))


# ── SPA ─────────────────────────────────────────────────────────────────────


def spa_init(P, k: int, gram=None, tol: float = 1e-9) -> list[int]:
    """Successive projection: k column indices of P chosen by largest residual
    norm after orthogonal deflation. Deterministic (first index wins ties)."""
    P = as_array(P)
    if P.ndim != 2:
        raise LatentActError(DIMENSION_MISMATCH, f"P must be 2-D, got {P.shape}")
    if k > P.shape[1]:
        raise LatentActError(
            INVALID_PARAMS,
            f"k={k} exceeds the number of columns ({P.shape[1]})",
        )
    factor = _embedding_factor(gram)
    R = P.copy() if factor is None else factor @ P
    scale = float(np.max(np.linalg.norm(R, axis=0))) if R.size else 0.0
    selected: list[int] = []
    for _ in range(k):
        norms = np.linalg.norm(R, axis=0)
        j = int(np.argmax(norms))
        if norms[j] <= tol * max(scale, 1e-300):
            raise LatentActError(
                DEGENERATE,
                f"SPA found only {len(selected)} independent columns for k={k}",
                selected=selected,
                effective_rank=len(selected),
            )
        u = R[:, j] / norms[j]
        R = R - np.outer(u, u @ R)
        selected.append(j)
    return selected


# ── alternating minimization ────────────────────────────────────────────────


def _alternate(P, T, opts: SolverOptions, gram) -> tuple[np.ndarray, np.ndarray, bool]:
    k = T.shape[1]
    eye = np.eye(k)
    Pi = fit_weights(T, P)
    rho = opts.rho0
    step = 1.0
    converged = False

    def total(T_, Pi_, rho_):
        value = _log_volume(T_, gram, opts.eps_det) + rho_ * _residual(P, T_, Pi_) ** 2
        return value if np.isfinite(value) else np.inf

    for _ in range(opts.max_iters):
        TtT = T.T @ T
        lipschitz = 2.0 * rho * max(np.linalg.norm(TtT, 2), 1e-12)
        TtP = T.T @ P
        for _ in range(opts.inner_iters):
            Pi = project_simplex(Pi - 2.0 * rho * (TtT @ Pi - TtP) / lipschitz)

        KT = T if gram is None else gram @ T
        inv = np.linalg.inv(T.T @ KT + opts.eps_det * eye)
        grad = 2.0 * KT @ inv - 2.0 * rho * (P - T @ Pi) @ Pi.T
        f0 = total(T, Pi, rho)
        t = step
        T_new = T
        while t > 1e-20:
            candidate = project_simplex(T - t * grad)
            if total(candidate, Pi, rho) <= f0:
                T_new = candidate
                break
            t *= 0.5
        step = min(2.0 * t, 1e6)
        change = float(np.max(np.abs(T_new - T)))
        T = T_new
        if rho >= opts.rho_max and change <= opts.projection_tol:
            converged = True
            break
        rho = min(rho * opts.rho_growth, opts.rho_max)
    return T, Pi, converged


def _polish(P, T, opts: SolverOptions) -> tuple[np.ndarray, np.ndarray]:
    """Fit-only alternating least squares; keeps a step only if the residual drops."""
    Pi = fit_weights(T, P)
    best = _residual(P, T, Pi)
    for _ in range(opts.polish_iters):
        T_ls = np.linalg.lstsq(Pi.T, P.T, rcond=None)[0].T
        T_try = project_simplex(T_ls)
        Pi_try = fit_weights(T_try, P)
        value = _residual(P, T_try, Pi_try)
        if value >= best:
            break
        T, Pi, best = T_try, Pi_try, value
    return T, Pi


def _select(candidates: list[dict], tol: float) -> dict | None:
    feasible = [c for c in candidates if c["residual"] <= tol]
    if not feasible:
        return None
    least = min(c["objective"] for c in feasible)
    tied = [
        c
        for c in feasible
        if c["objective"] <= least + _OBJECTIVE_TIE_RTOL * max(abs(least), 1e-300)
    ]
    return min(tied, key=lambda c: (c["residual"], c["index"]))


def _reduce(P: np.ndarray, r: int) -> np.ndarray:
    """Project columns onto the leading r-dim singular subspace, then back to
    the simplex."""
    U, _, _ = np.linalg.svd(P, full_matrices=False)
    Ur = U[:, :r]
    return normalize_columns(Ur @ (Ur.T @ P))


def minvol_factorize(P, opts: SolverOptions, gram=None) -> FactorizationResult:
    """Minimum-volume factorization of a column-stochastic P into T Pi.

    Raises RANK_DEFICIENT when rank(P) < k and opts.reduce_rank is off, and
    INFEASIBLE when no candidate reaches opts.feasibility_tol.
    """
    P = as_stochastic(P, name="P")
    if gram is not None:
        gram = np.asarray(gram, dtype=float)
        if gram.shape != (P.shape[0], P.shape[0]):
            raise LatentActError(
                DIMENSION_MISMATCH,
                f"gram shape {gram.shape} does not match P rows {P.shape[0]}",
            )
    factor = _embedding_factor(gram)
    effective_rank = numerical_rank(P if factor is None else factor @ P, opts.rank_tol)
    requested_k = opts.k
    k = opts.k
    reduced = False
    # residuals are reported against the caller's P even when solving at reduced rank
    P_data = P
    if effective_rank < k:
        if not opts.reduce_rank:
            raise LatentActError(
                RANK_DEFICIENT,
                f"rank(P) = {effective_rank} < k = {k}",
                effective_rank=effective_rank,
                k=k,
            )
        logger.warning(f"rank(P) = {effective_rank} < k = {k}; solving at reduced rank")
        P = _reduce(P_data, effective_rank)
        k = effective_rank
        reduced = True
    tol = opts.feasibility_tol

    idx = spa_init(P, k, gram=gram, tol=opts.rank_tol)
    T0 = P[:, idx].copy()
    candidates = []

    def record(index, label, T, Pi, converged):
        candidates.append(
            {
                "index": index,
                "label": label,
                "T": T,
                "Pi": Pi,
                "objective": det_volume(T, gram),
                "residual": _residual(P_data, T, Pi),
                "reduced_residual": _residual(P, T, Pi),
                "converged": converged,
            }
        )

    record(0, "spa", T0, fit_weights(T0, P), True)
    for r in range(opts.restarts):
        if r == 0:
            T_init = T0
        else:
            rng = stream(opts.seed, "minvol_restart", r)
            T_init = 0.7 * T0 + 0.3 * random_stochastic(rng, P.shape[0], k)
        T, _, converged = _alternate(P, T_init, opts, gram)
        T, Pi = _polish(P, T, opts)
        record(r + 1, f"restart-{r}", T, Pi, converged)

    best = _select(candidates, tol)
    if best is None:
        closest = min(c["residual"] for c in candidates)
        raise LatentActError(
            INFEASIBLE,
            f"no candidate within tolerance {tol:.3e} (best residual {closest:.3e})",
            best_residual=closest,
            tol=tol,
            effective_rank=effective_rank,
        )
    logger.debug(
        f"minvol: chose {best['label']} objective={best['objective']:.6e} "
        f"residual={best['residual']:.3e}"
    )
    return FactorizationResult(
        T=best["T"],
        Pi=best["Pi"],
        objective=best["objective"],
        residual=best["residual"],
        effective_rank=effective_rank,
        restarts_used=opts.restarts,
        converged=best["converged"],
        k=k,
        tol=tol,
        requested_k=requested_k,
        reduced=reduced,
        reduced_residual=best["reduced_residual"],
        chosen=best["label"],
        candidates=[
            {key: c[key] for key in ("label", "objective", "residual", "converged")}
            for c in candidates
        ],
    )


# ── permutations ────────────────────────────────────────────────────────────


def all_permutations(k: int) -> np.ndarray:
    if k > MAX_PERMUTATION_K:
        raise LatentActError(
            INVALID_PARAMS,
            f"k={k} too large for exhaustive permutation search "
            f"(max {MAX_PERMUTATION_K})",
        )
    return np.array(list(itertools.permutations(range(k))), dtype=int).reshape(-1, k)


def best_permutation_error(T, T_ref, Pi=None, Pi_ref=None) -> tuple[tuple, float]:
    """Permutation perm minimizing max(max|T[:, perm] - T_ref|,
    max|Pi[perm, :] - Pi_ref|), and that error."""
    T = as_array(T)
    T_ref = as_array(T_ref)
    if T.shape != T_ref.shape:
        raise LatentActError(
            DIMENSION_MISMATCH, f"T shape {T.shape} != T_ref shape {T_ref.shape}"
        )
    k = T.shape[1]
    perms = all_permutations(k)
    # cost[i, j]: reference label i matched to recovered label j
    cost = np.max(np.abs(T_ref[:, :, None] - T[:, None, :]), axis=0)
    if Pi is not None and Pi_ref is not None:
        Pi = as_array(Pi)
        Pi_ref = as_array(Pi_ref)
        if Pi.shape != Pi_ref.shape or Pi.shape[0] != k:
            raise LatentActError(
                DIMENSION_MISMATCH,
                f"Pi shape {Pi.shape} incompatible with Pi_ref {Pi_ref.shape}, k={k}",
            )
        cost = np.maximum(
            cost, np.max(np.abs(Pi_ref[:, None, :] - Pi[None, :, :]), axis=2)
        )
    errors = cost[np.arange(k), perms].max(axis=1)
    best = int(np.argmin(errors))
    return tuple(int(p) for p in perms[best]), float(errors[best])


def permutation_tv_errors(T, T_ref, Pi, Pi_ref, perm) -> tuple[float, float]:
    """Max column TV of T and of Pi after relabeling by perm."""
    perm = list(perm)
    tv_T = 0.5 * np.abs(as_array(T)[:, perm] - as_array(T_ref)).sum(axis=0)
    tv_Pi = 0.5 * np.abs(as_array(Pi)[perm, :] - as_array(Pi_ref)).sum(axis=0)
    return float(tv_T.max()), float(tv_Pi.max())


# ── determinant and no-scaling checks ───────────────────────────────────────


@dataclass
class DetBoundReport:
    feasible: bool
    reason: str
    abs_det: float
    within_bound: bool
    permutation_distance: float | None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def permutation_distance(A: np.ndarray) -> float:
    """Max-abs distance from A to the permutation matrix matching its largest
    entries."""
    A = as_array(A)
    rows, cols = linear_sum_assignment(-A)
    P = np.zeros_like(A)
    P[rows, cols] = 1.0
    return float(np.max(np.abs(A - P)))


def check_det_bound(A, Pi_star, tol: float = 1e-10) -> DetBoundReport:
    """Check |det A| <= 1 for A with A Pi* >= 0 and A^T 1 = 1."""
    A = as_array(A)
    Pi_star = as_array(Pi_star)
    k = Pi_star.shape[0]
    if A.shape != (k, k):
        raise LatentActError(
            DIMENSION_MISMATCH, f"A must be {k}x{k}, got {A.shape}"
        )
    abs_det = abs(float(np.linalg.det(A)))
    mixed = A @ Pi_star
    if mixed.min() < -NEGATIVE_CLAMP:
        return DetBoundReport(False, "A Pi* has negative entries", abs_det, True, None)
    if np.max(np.abs(A.sum(axis=0) - 1.0)) > 1e-10:
        return DetBoundReport(False, "A^T 1 != 1", abs_det, True, None)
    distance = permutation_distance(A) if abs_det >= 1.0 - 1e-8 else None
    return DetBoundReport(True, "feasible", abs_det, abs_det <= 1.0 + tol, distance)


def sample_feasible_mixing(
    Pi_star, rng: np.random.Generator, scale: float = 0.2, max_tries: int = 1000
) -> tuple[np.ndarray, int]:
    """Rejection-sample A near a random permutation with A^T 1 = 1 and
    A Pi* >= 0. Returns (A, tries used)."""
    Pi_star = as_array(Pi_star)
    k = Pi_star.shape[0]
    for tries in range(1, max_tries + 1):
        perm = rng.permutation(k)
        A = np.eye(k)[:, perm]
        if rng.random() < 0.1:
            return A, tries
        t = scale * rng.random() ** 3
        A = (1.0 - t) * A + t * random_stochastic(rng, k, k)
        A = A + 0.1 * t * rng.standard_normal((k, k))
        A = A - (A.sum(axis=0, keepdims=True) - 1.0) / k
        if (A @ Pi_star).min() >= 0:
            return A, tries
    raise LatentActError(
        DEGENERATE, f"no feasible A accepted in {max_tries} tries", max_tries=max_tries
    )


@dataclass
class NoScalingReport:
    all_stochastic: bool
    max_deviation: float
    holds: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def check_no_scaling(T, Pi, D, atol: float = 1e-12) -> NoScalingReport:
    """For T' = T D and Pi' = D^-1 Pi: if all four are column-stochastic then
    D must be the identity."""
    T = as_array(T)
    Pi = as_array(Pi)
    d = np.diag(as_array(D)) if np.ndim(D) == 2 else as_array(D)
    T_scaled = T * d[None, :]
    Pi_scaled = Pi / d[:, None]

    def stochastic(M):
        return bool(M.min() >= -NEGATIVE_CLAMP) and bool(
            np.max(np.abs(M.sum(axis=0) - 1.0)) <= atol / 2
        )

    all_stochastic = all(stochastic(M) for M in (T, Pi, T_scaled, Pi_scaled))
    deviation = float(np.max(np.abs(d - 1.0)))
    return NoScalingReport(
        all_stochastic=all_stochastic,
        max_deviation=deviation,
        holds=(not all_stochastic) or deviation <= atol,
    )


def sample_scaling_instance(rng: np.random.Generator, n: int, k: int, m: int):
    """(T, Pi, d): random stochastic factors and a diagonal that is exactly 1,
    1 up to ~1e-14, or far from 1 with equal odds."""
    T = random_stochastic(rng, n, k)
    Pi = random_stochastic(rng, k, m)
    mode = rng.integers(3)
    if mode == 0:
        d = np.ones(k)
    elif mode == 1:
        d = 1.0 + 1e-14 * rng.standard_normal(k)
    else:
        d = rng.uniform(0.5, 2.0, size=k)
    return T, Pi, d
