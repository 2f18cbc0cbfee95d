"""
Kernel mean embeddings of next-observation laws.

Inner products <Phi(p), Phi(q)> are computed in closed form:

  categorical / categorical   w_p^T K_atoms w_q
  gaussian / gaussian         (h^2 / s)^(d/2) exp(-|mu_p - mu_q|^2 / (2 s)),
                              s = h^2 + var_p + var_q
  dirac                       gaussian with var = 0, so k(x, y)
  dict_mixture (shared dict)  c_p^T K_dict c_q
  empirical                   mean pairwise kernel

Under a gaussian kernel every law is expanded into a weighted list of
gaussian components (atoms and sample points become diracs), so mixed pairs
use the same closed form. The finite-delta kernel embeds probability vectors
as themselves.
"""

from dataclasses import dataclass, field, replace
from typing import ClassVar, Literal

import numpy as np
from scipy.spatial.distance import cdist, pdist

from config import logger
from utils.errors import (
    DIMENSION_MISMATCH,
    INCOMPATIBLE_KERNEL,
    INVALID_PARAMS,
    NUMERICAL_FAULT,
    RANK_DEFICIENT,
    LatentActError,
)
from utils.rng import stream

from .nmf_minvol import FactorizationResult, SolverOptions, minvol_factorize
from .stochastic import clamp_negatives


def _check_weights(weights, name: str) -> np.ndarray:
    w = clamp_negatives(np.asarray(weights, dtype=float).ravel())
    if w.size == 0 or w.min() < 0 or abs(w.sum() - 1.0) > 1e-10:
        raise LatentActError(
            INVALID_PARAMS,
            f"{name} weights must be >= 0 and sum to 1 (sum {w.sum():.12f})",
        )
    return w


# ── kernel ──────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class Kernel:
    kind: Literal["gaussian", "finite_delta"]
    bandwidth: float = 1.0
    dim: int = 1
    size: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian", "finite_delta"):
            raise LatentActError(INVALID_PARAMS, f"unknown kernel kind {self.kind!r}")
        if self.kind == "gaussian" and not self.bandwidth > 0:
            raise LatentActError(
                INVALID_PARAMS, f"bandwidth must be > 0, got {self.bandwidth}"
            )

    @classmethod
    def gaussian(cls, bandwidth: float, dim: int) -> "Kernel":
        return cls("gaussian", bandwidth=float(bandwidth), dim=int(dim))

    @classmethod
    def finite_delta(cls, size: int) -> "Kernel":
        return cls("finite_delta", size=int(size))

    def evaluate(self, X, Y) -> np.ndarray:
        """Kernel matrix k(x_i, y_j)."""
        X = np.asarray(X, dtype=float)
        Y = np.asarray(Y, dtype=float)
        if self.kind == "finite_delta":
            return (X.reshape(-1)[:, None] == Y.reshape(-1)[None, :]).astype(float)
        sq = cdist(X.reshape(len(X), -1), Y.reshape(len(Y), -1), "sqeuclidean")
        return np.exp(-sq / (2.0 * self.bandwidth**2))

    def paired(self, X, Y) -> np.ndarray:
        """k(x_s, y_s) for matched rows."""
        X = np.asarray(X, dtype=float)
        Y = np.asarray(Y, dtype=float)
        if self.kind == "finite_delta":
            return np.all(X == Y, axis=-1).astype(float)
        sq = np.sum((X - Y) ** 2, axis=-1)
        return np.exp(-sq / (2.0 * self.bandwidth**2))

    def to_dict(self) -> dict:
        if self.kind == "finite_delta":
            return {"kind": self.kind, "size": self.size}
        return {"kind": self.kind, "bandwidth": self.bandwidth, "dim": self.dim}


# ── distributions ───────────────────────────────────────────────────────────


@dataclass(frozen=True, eq=False)
class Categorical:
    """Weights over finite atoms; `atoms` are points (n, d) or None for the
    index set 0..n-1 of a finite observation space."""

    weights: np.ndarray
    atoms: np.ndarray | None = None
    kind: ClassVar[str] = "categorical"

    def __post_init__(self):
        object.__setattr__(self, "weights", _check_weights(self.weights, "categorical"))
        if self.atoms is not None:
            atoms = np.asarray(self.atoms, dtype=float)
            atoms = atoms.reshape(len(atoms), -1)
            if len(atoms) != len(self.weights):
                raise LatentActError(
                    DIMENSION_MISMATCH,
                    f"{len(atoms)} atoms for {len(self.weights)} weights",
                )
            object.__setattr__(self, "atoms", atoms)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        idx = rng.choice(len(self.weights), size=size, p=self.weights)
        if self.atoms is None:
            return idx[:, None].astype(float)
        return self.atoms[idx]

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "weights": self.weights.tolist()}
        if self.atoms is not None:
            out["atoms"] = self.atoms.tolist()
        return out


@dataclass(frozen=True, eq=False)
class Gaussian:
    """Isotropic gaussian N(mean, var I); var = 0 is a Dirac mass."""

    mean: np.ndarray
    var: float = 0.0
    kind: ClassVar[str] = "gaussian"

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float).ravel())
        if not self.var >= 0:
            raise LatentActError(INVALID_PARAMS, f"variance must be >= 0, got {self.var}")
        object.__setattr__(self, "var", float(self.var))

    @property
    def is_dirac(self) -> bool:
        return self.var == 0.0

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        noise = rng.standard_normal((size, self.mean.size))
        return self.mean[None, :] + np.sqrt(self.var) * noise

    def to_dict(self) -> dict:
        return {"kind": "dirac" if self.is_dirac else self.kind,
                "mean": self.mean.tolist(), "var": self.var}


def dirac(point) -> Gaussian:
    return Gaussian(np.asarray(point, dtype=float), 0.0)


@dataclass(frozen=True, eq=False)
class Empirical:
    points: np.ndarray
    kind: ClassVar[str] = "empirical"

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        if len(points) == 0:
            raise LatentActError(INVALID_PARAMS, "empirical distribution has no points")
        object.__setattr__(self, "points", points)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return self.points[rng.integers(len(self.points), size=size)]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "points": self.points.tolist()}


@dataclass(frozen=True, eq=False)
class ComponentDictionary:
    """Fixed base distributions plus their Gram matrix under `kernel`."""

    components: tuple
    kernel: Kernel
    gram: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        components = tuple(self.components)
        if not components:
            raise LatentActError(INVALID_PARAMS, "dictionary has no components")
        for c in components:
            if not isinstance(c, (Categorical, Gaussian)):
                raise LatentActError(
                    INVALID_PARAMS,
                    f"dictionary components must be categorical or gaussian, got {c.kind}",
                )
        object.__setattr__(self, "components", components)
        K = gram_matrix(list(components), self.kernel)
        if np.max(np.abs(K - K.T)) > 1e-10 or np.linalg.eigvalsh(K).min() < -1e-10:
            raise LatentActError(NUMERICAL_FAULT, "dictionary Gram is not symmetric PSD")
        object.__setattr__(self, "gram", K)

    @property
    def size(self) -> int:
        return len(self.components)

    def mixture(self, weights) -> "DictMixture":
        return DictMixture(np.asarray(weights, dtype=float), self)

    @classmethod
    def atoms(cls, n: int) -> "ComponentDictionary":
        """Unit categoricals on n states under the finite-delta kernel."""
        return cls(tuple(Categorical(np.eye(n)[i]) for i in range(n)), Kernel.finite_delta(n))

    @classmethod
    def gaussians(cls, means, variances, kernel: Kernel) -> "ComponentDictionary":
        means = np.asarray(means, dtype=float)
        variances = np.broadcast_to(np.asarray(variances, dtype=float), (len(means),))
        return cls(tuple(Gaussian(mu, v) for mu, v in zip(means, variances)), kernel)

    def to_dict(self) -> dict:
        return {
            "kernel": self.kernel.to_dict(),
            "components": [c.to_dict() for c in self.components],
        }


@dataclass(frozen=True, eq=False)
class DictMixture:
    weights: np.ndarray
    dictionary: ComponentDictionary
    kind: ClassVar[str] = "dict_mixture"

    def __post_init__(self):
        w = _check_weights(self.weights, "dict_mixture")
        if w.size != self.dictionary.size:
            raise LatentActError(
                DIMENSION_MISMATCH,
                f"{w.size} weights for a dictionary of {self.dictionary.size}",
            )
        object.__setattr__(self, "weights", w)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        which = rng.choice(self.dictionary.size, size=size, p=self.weights)
        first = self.dictionary.components[0].sample(rng, 1)
        out = np.empty((size, first.shape[1]))
        for c in np.unique(which):
            mask = which == c
            out[mask] = self.dictionary.components[c].sample(rng, int(mask.sum()))
        return out

    def to_dict(self) -> dict:
        return {"kind": self.kind, "weights": self.weights.tolist()}


TransitionDistribution = Categorical | Gaussian | DictMixture | Empirical


def distribution_from_dict(doc: dict, dictionary: ComponentDictionary | None = None):
    kind = doc.get("kind")
    if kind == "categorical":
        return Categorical(np.asarray(doc["weights"]), doc.get("atoms"))
    if kind in ("gaussian", "dirac"):
        return Gaussian(np.asarray(doc["mean"]), float(doc.get("var", 0.0)))
    if kind == "empirical":
        return Empirical(np.asarray(doc["points"]))
    if kind == "dict_mixture":
        if dictionary is None:
            raise LatentActError(INVALID_PARAMS, "dict_mixture needs a dictionary")
        return DictMixture(np.asarray(doc["weights"]), dictionary)
    raise LatentActError(INVALID_PARAMS, f"unknown distribution kind {kind!r}")


# ── canonical forms ─────────────────────────────────────────────────────────


def _gaussian_components(dist) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(weights, means, variances) of `dist` as a gaussian mixture."""
    if isinstance(dist, Gaussian):
        return np.ones(1), dist.mean[None, :], np.array([dist.var])
    if isinstance(dist, Empirical):
        n = len(dist.points)
        return np.full(n, 1.0 / n), dist.points, np.zeros(n)
    if isinstance(dist, Categorical):
        if dist.atoms is None:
            raise LatentActError(
                INCOMPATIBLE_KERNEL,
                "categorical over state indices needs the finite-delta kernel",
            )
        return dist.weights, dist.atoms, np.zeros(len(dist.weights))
    if isinstance(dist, DictMixture):
        parts = [_gaussian_components(c) for c in dist.dictionary.components]
        weights = np.concatenate([w * c for (w, _, _), c in zip(parts, dist.weights)])
        means = np.vstack([m for _, m, _ in parts])
        variances = np.concatenate([v for _, _, v in parts])
        return weights, means, variances
    raise LatentActError(INVALID_PARAMS, f"unsupported distribution {type(dist).__name__}")


def _probability_vector(dist, size: int) -> np.ndarray:
    if isinstance(dist, Categorical) and dist.atoms is None:
        if dist.weights.size != size:
            raise LatentActError(
                DIMENSION_MISMATCH,
                f"categorical over {dist.weights.size} states, kernel over {size}",
            )
        return dist.weights
    if isinstance(dist, DictMixture):
        basis = np.column_stack(
            [_probability_vector(c, size) for c in dist.dictionary.components]
        )
        return basis @ dist.weights
    raise LatentActError(
        INCOMPATIBLE_KERNEL,
        f"{dist.kind} distribution is not defined on a finite state space",
    )


def _closed_form(means_a, vars_a, means_b, vars_b, kernel: Kernel) -> np.ndarray:
    h2 = kernel.bandwidth**2
    d = means_a.shape[1]
    if means_b.shape[1] != d:
        raise LatentActError(
            DIMENSION_MISMATCH, f"dimension {d} vs {means_b.shape[1]}"
        )
    s = h2 + vars_a[:, None] + vars_b[None, :]
    sq = cdist(means_a, means_b, "sqeuclidean")
    return (h2 / s) ** (d / 2.0) * np.exp(-sq / (2.0 * s))


def _shared_dictionary(dists) -> ComponentDictionary | None:
    if dists and all(isinstance(p, DictMixture) for p in dists):
        first = dists[0].dictionary
        if all(p.dictionary is first for p in dists):
            return first
    return None


# ── Gram matrices ───────────────────────────────────────────────────────────


def cross_gram(dists_a: list, dists_b: list, kernel: Kernel) -> np.ndarray:
    """Matrix of <Phi(a_i), Phi(b_j)>."""
    shared = _shared_dictionary(list(dists_a) + list(dists_b))
    if shared is not None:
        Ca = np.column_stack([p.weights for p in dists_a])
        Cb = np.column_stack([p.weights for p in dists_b])
        return Ca.T @ shared.gram @ Cb
    if kernel.kind == "finite_delta":
        Va = np.column_stack([_probability_vector(p, kernel.size) for p in dists_a])
        Vb = np.column_stack([_probability_vector(p, kernel.size) for p in dists_b])
        return Va.T @ Vb
    parts_a = [_gaussian_components(p) for p in dists_a]
    parts_b = [_gaussian_components(p) for p in dists_b]
    out = np.empty((len(dists_a), len(dists_b)))
    for i, (wa, ma, va) in enumerate(parts_a):
        for j, (wb, mb, vb) in enumerate(parts_b):
            out[i, j] = wa @ _closed_form(ma, va, mb, vb, kernel) @ wb
    return out


def gram_matrix(dists: list, kernel: Kernel, check_psd: bool = True) -> np.ndarray:
    """Embedded Gram matrix G[i, j] = <Phi(t_i), Phi(t_j)>, symmetrized."""
    if not dists:
        raise LatentActError(INVALID_PARAMS, "gram_matrix needs at least one distribution")
    G = cross_gram(dists, dists, kernel)
    G = 0.5 * (G + G.T)
    if check_psd:
        smallest = float(np.linalg.eigvalsh(G).min())
        if smallest < -1e-9:
            raise LatentActError(
                NUMERICAL_FAULT,
                f"Gram matrix has eigenvalue {smallest:.3e} < -1e-9",
                min_eigenvalue=smallest,
            )
    return G


def gram_matrix_mc(dists: list, kernel: Kernel, num_samples: int, seed: int) -> np.ndarray:
    """Monte-Carlo Gram: E k(x, y) with x ~ t_i, y ~ t_j independent, from
    `num_samples` paired draws per entry."""
    if num_samples < 1:
        raise LatentActError(INVALID_PARAMS, "num_samples must be >= 1")
    k = len(dists)
    draws = [d.sample(stream(seed, "gram_mc", i, "x"), num_samples) for i, d in enumerate(dists)]
    fresh = [d.sample(stream(seed, "gram_mc", i, "y"), num_samples) for i, d in enumerate(dists)]
    G = np.empty((k, k))
    for i in range(k):
        for j in range(i, k):
            other = fresh[j] if i == j else draws[j]
            G[i, j] = G[j, i] = float(kernel.paired(draws[i], other).mean())
    return G


def embedded_rank(dists: list, kernel: Kernel, tol: float = 1e-9) -> int:
    """Eigenvalues of the Gram above tol * largest."""
    eig = np.linalg.eigvalsh(gram_matrix(dists, kernel, check_psd=False))
    top = float(eig.max())
    if top <= 0:
        return 0
    return int(np.sum(eig > tol * top))


def mmd_distance(p, q, kernel: Kernel) -> float:
    """||Phi(p) - Phi(q)||, clamped at 0 before the square root."""
    G = cross_gram([p, q], [p, q], kernel)
    return float(np.sqrt(max(G[0, 0] - 2.0 * G[0, 1] + G[1, 1], 0.0)))


def mmd_matrix(dists_a: list, dists_b: list, kernel: Kernel) -> np.ndarray:
    """Pairwise MMD between two lists."""
    Gaa = np.diag(cross_gram(dists_a, dists_a, kernel))
    Gbb = np.diag(cross_gram(dists_b, dists_b, kernel))
    Gab = cross_gram(dists_a, dists_b, kernel)
    return np.sqrt(np.maximum(Gaa[:, None] - 2.0 * Gab + Gbb[None, :], 0.0))


def median_bandwidth(points) -> float:
    """Median pairwise distance; 1.0 when there is no positive distance."""
    points = np.asarray(points, dtype=float)
    if len(points) < 2:
        return 1.0
    distances = pdist(points.reshape(len(points), -1))
    distances = distances[distances > 0]
    return float(np.median(distances)) if distances.size else 1.0


# ── options ─────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class EmbeddingOptions:
    kernel: Literal["gaussian", "finite_delta"] = "gaussian"
    # None: median heuristic over dictionary component means
    bandwidth: float | None = None
    mc_samples: int = 100_000
    mc_pairs: int = 20
    rank_tol: float = 1e-9

    def __post_init__(self):
        if self.kernel not in ("gaussian", "finite_delta"):
            raise LatentActError(INVALID_PARAMS, f"unknown kernel {self.kernel!r}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise LatentActError(INVALID_PARAMS, "bandwidth must be > 0")
        if self.mc_samples < 1 or self.mc_pairs < 0:
            raise LatentActError(INVALID_PARAMS, "mc_samples must be >= 1")

    def make_kernel(self, points=None, dim: int = 1, size: int = 0) -> Kernel:
        if self.kernel == "finite_delta":
            return Kernel.finite_delta(size)
        bandwidth = self.bandwidth
        if bandwidth is None:
            bandwidth = median_bandwidth(points) if points is not None else 1.0
        return Kernel.gaussian(bandwidth, dim)


# ── continuous minimum-volume factorization ─────────────────────────────────


@dataclass
class ContinuousFactorization:
    t_bar: list
    Pi: np.ndarray
    C: np.ndarray
    objective: float
    residual: float
    embedded_rank: int
    result: FactorizationResult

    def to_dict(self) -> dict:
        return {
            "C": self.C.T.tolist(),
            "Pi": self.Pi.T.tolist(),
            "objective": self.objective,
            "residual": self.residual,
            "embedded_rank": self.embedded_rank,
            "solver": self.result.to_dict(include_factors=False),
        }


def continuous_minvol_factorize(
    observables: list, k: int, opts: SolverOptions
) -> ContinuousFactorization:
    """Minimum Gram-determinant factorization over a shared component dictionary.

    Each observable p_e is a dict_mixture with coordinates w_e; the solver
    finds stochastic coordinates C (one column per latent transition) and Pi
    with W = C Pi, minimizing det(C^T K_dict C).
    """
    if not observables:
        raise LatentActError(INVALID_PARAMS, "no observables")
    if not all(isinstance(p, DictMixture) for p in observables):
        raise LatentActError(INVALID_PARAMS, "observables must be dict_mixture distributions")
    dictionary = _shared_dictionary(observables)
    if dictionary is None:
        raise LatentActError(
            DIMENSION_MISMATCH, "observables do not share one component dictionary"
        )
    W = np.column_stack([p.weights for p in observables])
    rank = embedded_rank(observables, dictionary.kernel, opts.rank_tol)
    if rank < k and not opts.reduce_rank:
        raise LatentActError(
            RANK_DEFICIENT,
            f"embedded rank of observables {rank} < k = {k}",
            effective_rank=rank,
            k=k,
        )
    result = minvol_factorize(W, replace(opts, k=k), gram=dictionary.gram)
    t_bar = [DictMixture(result.T[:, a], dictionary) for a in range(result.k)]
    logger.info(
        f"continuous minvol: k={result.k} embedded_rank={rank} "
        f"objective={result.objective:.6e} residual={result.residual:.3e}"
    )
    return ContinuousFactorization(
        t_bar=t_bar,
        Pi=result.Pi,
        C=result.T,
        objective=result.objective,
        residual=result.residual,
        embedded_rank=rank,
        result=result,
    )
