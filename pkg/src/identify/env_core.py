"""
Generative model of demonstrator-tagged transitions.

A LatentEnv holds, for every state o, the latent transition factor T*(o)
(one next-observation law per latent action) and the policy matrix Pi*(o)
(one action distribution per demonstrator). The observable family is the
mixture P*(o) = T*(o) Pi*(o).
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, NamedTuple

import numpy as np
import pandas as pd

from config import STOCHASTIC_ATOL, logger
from utils.errors import (
    DEGENERATE,
    DIMENSION_MISMATCH,
    INVALID_PARAMS,
    LatentActError,
)
from utils.rng import stream

from .embedding import Gaussian, distribution_from_dict
from .stochastic import Factorization, as_stochastic, random_stochastic


# ── types ───────────────────────────────────────────────────────────────────


@dataclass(frozen=True, eq=False)
class ObservationSpace:
    kind: Literal["finite", "continuous"]
    size: int = 0
    dim: int = 0
    # evaluation states of a continuous space, one row per state
    grid: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "finite":
            if self.size < 1:
                raise LatentActError(INVALID_PARAMS, f"finite space needs size >= 1, got {self.size}")
        elif self.kind == "continuous":
            if self.dim < 1:
                raise LatentActError(INVALID_PARAMS, f"continuous space needs dim >= 1, got {self.dim}")
            if self.grid is not None:
                grid = np.asarray(self.grid, dtype=float).reshape(-1, self.dim)
                if len(np.unique(grid, axis=0)) != len(grid):
                    raise LatentActError(INVALID_PARAMS, "grid states must be pairwise distinct")
                object.__setattr__(self, "grid", grid)
        else:
            raise LatentActError(INVALID_PARAMS, f"unknown space kind {self.kind!r}")

    @property
    def is_finite(self) -> bool:
        return self.kind == "finite"

    def to_dict(self) -> dict:
        if self.is_finite:
            return {"kind": self.kind, "size": self.size}
        out = {"kind": self.kind, "dim": self.dim}
        if self.grid is not None:
            out["grid"] = self.grid.tolist()
        return out


class EnvShape(NamedTuple):
    kind: str
    n: int
    dim: int
    k: int
    m: int
    states: tuple


@dataclass(frozen=True, eq=False)
class LatentEnv:
    k: int
    m: int
    space: ObservationSpace
    states: tuple
    # finite: state -> (n x k) array; continuous: state -> list of k distributions
    T_star: dict
    Pi_star: dict
    identifiable_by_construction: bool = False

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(int(s) for s in self.states))
        if not self.states:
            raise LatentActError(INVALID_PARAMS, "environment has no states")
        missing = [s for s in self.states if s not in self.T_star or s not in self.Pi_star]
        if missing:
            raise LatentActError(INVALID_PARAMS, f"states without factors: {missing}")
        if self.identifiable_by_construction and self.k > self.m:
            raise LatentActError(
                INVALID_PARAMS,
                f"identifiable-by-construction needs k <= m (k={self.k}, m={self.m})",
            )
        T_star, Pi_star = {}, {}
        for s in self.states:
            Pi = as_stochastic(self.Pi_star[s], STOCHASTIC_ATOL, name=f"Pi_star[{s}]")
            if Pi.shape != (self.k, self.m):
                raise LatentActError(
                    DIMENSION_MISMATCH, f"Pi_star[{s}] is {Pi.shape}, expected {(self.k, self.m)}"
                )
            Pi_star[s] = Pi
            if self.space.is_finite:
                T = as_stochastic(self.T_star[s], STOCHASTIC_ATOL, name=f"T_star[{s}]")
                if T.shape != (self.space.size, self.k):
                    raise LatentActError(
                        DIMENSION_MISMATCH,
                        f"T_star[{s}] is {T.shape}, expected {(self.space.size, self.k)}",
                    )
                T_star[s] = T
            else:
                dists = list(self.T_star[s])
                if len(dists) != self.k:
                    raise LatentActError(
                        DIMENSION_MISMATCH, f"T_star[{s}] has {len(dists)} laws, expected {self.k}"
                    )
                T_star[s] = dists
        object.__setattr__(self, "T_star", T_star)
        object.__setattr__(self, "Pi_star", Pi_star)

    @property
    def shape(self) -> EnvShape:
        return EnvShape(
            kind=self.space.kind,
            n=self.space.size,
            dim=self.space.dim,
            k=self.k,
            m=self.m,
            states=self.states,
        )

    def observable(self, state: int) -> np.ndarray:
        """Exact P*(o); finite spaces only."""
        if not self.space.is_finite:
            raise LatentActError(INVALID_PARAMS, "observable matrices exist for finite spaces only")
        return mix_observable(self.T_star[state], self.Pi_star[state])


@dataclass
class TrajectoryBatch:
    o: np.ndarray
    o_next: np.ndarray
    e: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        self.o = np.asarray(self.o, dtype=int)
        self.e = np.asarray(self.e, dtype=int)
        self.o_next = np.asarray(self.o_next)
        if not (len(self.o) == len(self.o_next) == len(self.e)):
            raise LatentActError(DIMENSION_MISMATCH, "batch arrays differ in length")

    def __len__(self) -> int:
        return len(self.o)

    def validate(self, shape: EnvShape) -> None:
        """Every row lies in the environment: o in its states, e in [m), and
        o_next in [n) for finite spaces or a finite dim-vector otherwise."""
        if not len(self):
            return
        unknown = sorted(set(np.unique(self.o).tolist()) - set(shape.states))
        if unknown:
            raise LatentActError(
                INVALID_PARAMS, f"batch has states outside the env: {unknown}", states=unknown
            )
        if self.e.min() < 0 or self.e.max() >= shape.m:
            raise LatentActError(INVALID_PARAMS, f"batch demonstrators must lie in [0, {shape.m})")
        if shape.kind == "finite":
            values = np.asarray(self.o_next, dtype=float)
            if values.ndim != 1 or np.any(values != np.round(values)):
                raise LatentActError(INVALID_PARAMS, "finite next states must be integer labels")
            if values.min() < 0 or values.max() >= shape.n:
                raise LatentActError(INVALID_PARAMS, f"batch next states must lie in [0, {shape.n})")
            return
        x = np.asarray(self.o_next, dtype=float).reshape(len(self), -1)
        if x.shape[1] != shape.dim:
            raise LatentActError(
                DIMENSION_MISMATCH, f"next observations have dim {x.shape[1]}, env dim {shape.dim}"
            )
        if not np.all(np.isfinite(x)):
            raise LatentActError(INVALID_PARAMS, "next observations must be finite")

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"o": self.o.astype(int)})
        if self.o_next.ndim == 1:
            frame["o_next"] = self.o_next
        else:
            for j in range(self.o_next.shape[1]):
                frame[f"o_next_{j}"] = self.o_next[:, j]
        frame["e"] = self.e.astype(int)
        return frame

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def from_csv(cls, path) -> "TrajectoryBatch":
        frame = pd.read_csv(path)
        if "o_next" in frame:
            o_next = frame["o_next"].to_numpy()
        else:
            cols = sorted(
                (c for c in frame.columns if c.startswith("o_next_")),
                key=lambda c: int(c.rsplit("_", 1)[1]),
            )
            o_next = frame[cols].to_numpy(dtype=float)
        return cls(frame["o"].to_numpy(dtype=int), o_next, frame["e"].to_numpy(dtype=int))


@dataclass
class AnchorDataset:
    o: np.ndarray
    e: np.ndarray
    a_star: np.ndarray

    def __post_init__(self):
        self.o = np.asarray(self.o, dtype=int)
        self.e = np.asarray(self.e, dtype=int)
        self.a_star = np.asarray(self.a_star, dtype=int)
        if not (len(self.o) == len(self.e) == len(self.a_star)):
            raise LatentActError(DIMENSION_MISMATCH, "anchor arrays differ in length")

    def __len__(self) -> int:
        return len(self.o)

    def validate(self, k: int, m: int) -> None:
        if len(self) and (self.a_star.min() < 0 or self.a_star.max() >= k):
            raise LatentActError(INVALID_PARAMS, f"anchor labels must lie in [0, {k})")
        if len(self) and (self.e.min() < 0 or self.e.max() >= m):
            raise LatentActError(INVALID_PARAMS, f"anchor demonstrators must lie in [0, {m})")

    def relabeled(self, perm) -> "AnchorDataset":
        """Anchors with every label a mapped to perm[a]."""
        return AnchorDataset(self.o, self.e, np.asarray(perm, dtype=int)[self.a_star])

    def to_dict(self) -> dict:
        return {"o": self.o.tolist(), "e": self.e.tolist(), "a_star": self.a_star.tolist()}


@dataclass
class EmpiricalConditional:
    """Per-state count matrices (n x m) and their normalized columns.

    Columns with zero count are NaN in `matrices` and listed in `missing`.
    """

    counts: dict
    matrices: dict = field(init=False)
    missing: dict = field(init=False)

    def __post_init__(self):
        self.matrices = {}
        self.missing = {}
        for s, C in self.counts.items():
            totals = C.sum(axis=0)
            P = np.full(C.shape, np.nan)
            seen = totals > 0
            P[:, seen] = C[:, seen] / totals[seen]
            self.matrices[s] = P
            self.missing[s] = [int(e) for e in np.flatnonzero(~seen)]

    def totals(self, state: int) -> np.ndarray:
        return self.counts[state].sum(axis=0)

    def min_column_count(self) -> int:
        observed = [t for s in self.counts for t in self.totals(s) if t > 0]
        return int(min(observed)) if observed else 0

    def observed_matrix(self, state: int) -> tuple[np.ndarray, list[int]]:
        """(P restricted to observed columns, their demonstrator ids)."""
        keep = [e for e in range(self.counts[state].shape[1]) if e not in self.missing[state]]
        return self.matrices[state][:, keep], keep

    def to_dict(self) -> dict:
        return {
            str(s): {"totals": self.totals(s).tolist(), "missing": self.missing[s]}
            for s in self.counts
        }


# ── operations ──────────────────────────────────────────────────────────────


def mix_observable(T_o, Pi_o) -> np.ndarray:
    """P = T Pi for column-stochastic T (n x k) and Pi (k x m)."""
    T = as_stochastic(T_o, 1e-10, name="T")
    Pi = as_stochastic(Pi_o, 1e-10, name="Pi")
    if T.shape[1] != Pi.shape[0]:
        raise LatentActError(
            DIMENSION_MISMATCH, f"T is {T.shape} but Pi is {Pi.shape}"
        )
    return T @ Pi


def _start_weights(start_dist, num_states: int, m: int) -> np.ndarray:
    if start_dist is None:
        return np.full(num_states * m, 1.0 / (num_states * m))
    w = np.asarray(start_dist, dtype=float)
    if w.shape != (num_states, m):
        raise LatentActError(
            DIMENSION_MISMATCH, f"start_dist must be {(num_states, m)}, got {w.shape}"
        )
    if not np.all(np.isfinite(w)) or w.min() < 0 or w.sum() <= 0:
        raise LatentActError(DEGENERATE, "start_dist has no positive mass")
    return (w / w.sum()).ravel()


def _inverse_cdf(weights: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(weights)
    cdf = cdf / cdf[-1]
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(weights) - 1)


def sample_transitions(env: LatentEnv, start_dist, N: int, seed: int) -> TrajectoryBatch:
    """Draw N i.i.d. triples (o, o', e).

    (o, e) ~ start_dist (uniform over states x demonstrators when None), then
    a ~ Pi*(o)[:, e] and o' ~ T*(o)[:, a]. Per-state draws use their own
    stream so one state's data does not depend on another's.
    """
    if N < 1:
        raise LatentActError(INVALID_PARAMS, f"N must be >= 1, got {N}")
    S = len(env.states)
    weights = _start_weights(start_dist, S, env.m)
    flat = _inverse_cdf(weights, stream(seed, "sample_transitions", "start").random(N))
    state_idx, e = np.divmod(flat, env.m)
    o = np.asarray(env.states, dtype=int)[state_idx]
    if env.space.is_finite:
        o_next = np.empty(N, dtype=int)
    else:
        o_next = np.empty((N, env.space.dim))
    for s in env.states:
        rows = np.flatnonzero(o == s)
        if rows.size == 0:
            continue
        rng = stream(seed, "sample_transitions", s)
        Pi = env.Pi_star[s]
        actions = np.empty(rows.size, dtype=int)
        u = rng.random(rows.size)
        for d in range(env.m):
            mask = e[rows] == d
            actions[mask] = _inverse_cdf(Pi[:, d], u[mask])
        if env.space.is_finite:
            T = env.T_star[s]
            v = rng.random(rows.size)
            for a in range(env.k):
                mask = actions == a
                o_next[rows[mask]] = _inverse_cdf(T[:, a], v[mask])
        else:
            for a in range(env.k):
                mask = actions == a
                if mask.any():
                    o_next[rows[mask]] = env.T_star[s][a].sample(rng, int(mask.sum()))
    logger.debug(f"sampled {N} transitions over {S} states (seed={seed})")
    return TrajectoryBatch(o=o, o_next=o_next, e=e.astype(int), seed=seed)


def estimate_conditionals(batch: TrajectoryBatch, shape: EnvShape) -> EmpiricalConditional:
    """Empirical next-state frequencies per (o, e); finite spaces only."""
    if shape.kind != "finite":
        raise LatentActError(INVALID_PARAMS, "estimate_conditionals needs a finite space")
    batch.validate(shape)
    counts = {s: np.zeros((shape.n, shape.m)) for s in shape.states}
    if len(batch):
        o_next = np.asarray(batch.o_next, dtype=int)
        for s in shape.states:
            rows = batch.o == s
            np.add.at(counts[s], (o_next[rows], batch.e[rows]), 1.0)
    result = EmpiricalConditional(counts)
    gaps = sum(len(v) for v in result.missing.values())
    if gaps:
        logger.warning(f"{gaps} (state, demonstrator) columns have no samples")
    return result


def build_counterexample() -> tuple[np.ndarray, Factorization, Factorization]:
    """One observable column (1/2, 1/2) with two stochastic factorizations that
    are not related by a permutation."""
    P = np.array([[0.5], [0.5]])
    weights = np.array([[0.5], [0.5]])
    A = Factorization(np.array([[1.0, 0.0], [0.0, 1.0]]), weights.copy())
    B = Factorization(np.array([[0.75, 0.25], [0.25, 0.75]]), weights.copy())
    return P, A, B


def sample_anchors(env: LatentEnv, r: int, seed: int, start_dist=None) -> AnchorDataset:
    """r labeled triples (o, e, a*) with a* ~ Pi*(o)[:, e]."""
    if r < 1:
        raise LatentActError(INVALID_PARAMS, f"r must be >= 1, got {r}")
    rng = stream(seed, "sample_anchors")
    weights = _start_weights(start_dist, len(env.states), env.m)
    flat = _inverse_cdf(weights, rng.random(r))
    state_idx, e = np.divmod(flat, env.m)
    o = np.asarray(env.states, dtype=int)[state_idx]
    u = rng.random(r)
    a_star = np.array(
        [int(_inverse_cdf(env.Pi_star[s][:, d], u[i : i + 1])[0]) for i, (s, d) in enumerate(zip(o, e))],
        dtype=int,
    )
    return AnchorDataset(o=o, e=e.astype(int), a_star=a_star)


# ── environment builders ────────────────────────────────────────────────────


def separable_policy(rng: np.random.Generator, k: int, m: int) -> np.ndarray:
    """[I_k | m - k random stochastic columns]."""
    if m < k:
        raise LatentActError(INVALID_PARAMS, f"separable policy needs m >= k (k={k}, m={m})")
    return np.hstack([np.eye(k), random_stochastic(rng, k, m - k)])


def random_finite_env(
    n: int,
    k: int,
    m: int,
    num_states: int = 1,
    seed: int = 0,
    separable: bool = True,
) -> LatentEnv:
    """Dirichlet transitions per state; Pi* = [I_k | random columns] when
    separable, all-random columns otherwise."""
    if n < 1 or k < 1 or m < 1 or num_states < 1:
        raise LatentActError(INVALID_PARAMS, "n, k, m and num_states must be >= 1")
    T_star, Pi_star = {}, {}
    for s in range(num_states):
        rng = stream(seed, "random_finite_env", s)
        T_star[s] = random_stochastic(rng, n, k)
        Pi_star[s] = separable_policy(rng, k, m) if separable else random_stochastic(rng, k, m)
    return LatentEnv(
        k=k,
        m=m,
        space=ObservationSpace("finite", size=n),
        states=tuple(range(num_states)),
        T_star=T_star,
        Pi_star=Pi_star,
        identifiable_by_construction=separable and k <= m and k <= n,
    )


def smooth_path_env(
    num_nodes: int,
    k: int,
    m: int,
    dim: int = 2,
    seed: int = 0,
    var: float = 0.0,
    spacing: float = 3.0,
    wiggle: float = 0.5,
) -> LatentEnv:
    """Continuous env on a path of evaluation states s in [0, 1].

    Action a moves to mean  spacing * a * e_1 + wiggle * sin(2 pi s + phase_a),
    so laws vary smoothly along the path while distinct actions stay
    `spacing` apart. var = 0 gives Dirac transitions.
    """
    if num_nodes < 1 or k < 1 or m < k:
        raise LatentActError(INVALID_PARAMS, "need num_nodes >= 1 and 1 <= k <= m")
    rng = stream(seed, "smooth_path_env")
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(k, dim))
    offsets = np.zeros((k, dim))
    offsets[:, 0] = spacing * np.arange(k)
    positions = np.linspace(0.0, 1.0, num_nodes)
    T_star, Pi_star = {}, {}
    for s, pos in enumerate(positions):
        means = offsets + wiggle * np.sin(2.0 * np.pi * pos + phases)
        T_star[s] = [Gaussian(mu, var) for mu in means]
        Pi_star[s] = separable_policy(stream(seed, "smooth_path_env", s), k, m)
    return LatentEnv(
        k=k,
        m=m,
        space=ObservationSpace("continuous", dim=dim, grid=positions[:, None] if dim == 1 else None),
        states=tuple(range(num_nodes)),
        T_star=T_star,
        Pi_star=Pi_star,
        identifiable_by_construction=True,
    )


def collapse_env(n: int = 4, k: int = 2, m: int = 3, seed: int = 0) -> LatentEnv:
    """All latent transitions coincide, so the likelihood carries no
    information about the policy."""
    rng = stream(seed, "collapse_env")
    column = random_stochastic(rng, n, 1)
    return LatentEnv(
        k=k,
        m=m,
        space=ObservationSpace("finite", size=n),
        states=(0,),
        T_star={0: np.repeat(column, k, axis=1)},
        Pi_star={0: separable_policy(rng, k, m)},
        identifiable_by_construction=False,
    )


@dataclass(frozen=True)
class EnvironmentOptions:
    kind: Literal["random_finite", "smooth_path", "collapse", "file"] = "random_finite"
    n: int = 6
    k: int = 3
    m: int = 5
    num_states: int = 1
    separable: bool = True
    num_nodes: int = 50
    dim: int = 2
    var: float = 0.0
    path: str | None = None

    def __post_init__(self):
        if self.kind not in ("random_finite", "smooth_path", "collapse", "file"):
            raise LatentActError(INVALID_PARAMS, f"unknown environment kind {self.kind!r}")
        if self.kind == "file" and not self.path:
            raise LatentActError(INVALID_PARAMS, "environment kind 'file' needs a path")
        if min(self.n, self.k, self.m, self.num_states, self.num_nodes, self.dim) < 1:
            raise LatentActError(INVALID_PARAMS, "environment sizes must be >= 1")
        if self.var < 0:
            raise LatentActError(INVALID_PARAMS, f"var must be >= 0, got {self.var}")


def build_environment(opts: EnvironmentOptions, seed: int) -> LatentEnv:
    if opts.kind == "random_finite":
        return random_finite_env(opts.n, opts.k, opts.m, opts.num_states, seed, opts.separable)
    if opts.kind == "smooth_path":
        return smooth_path_env(opts.num_nodes, opts.k, opts.m, opts.dim, seed, opts.var)
    if opts.kind == "collapse":
        return collapse_env(opts.n, opts.k, opts.m, seed)
    return env_from_document(json.loads(Path(opts.path).read_text()))


# ── documents ───────────────────────────────────────────────────────────────


def env_to_document(env: LatentEnv) -> dict:
    """{k, m, space, states, T_star, Pi_star} with column-major matrices."""
    if env.space.is_finite:
        T_doc = {str(s): env.T_star[s].T.tolist() for s in env.states}
    else:
        T_doc = {str(s): [d.to_dict() for d in env.T_star[s]] for s in env.states}
    return {
        "k": env.k,
        "m": env.m,
        "space": env.space.to_dict(),
        "states": list(env.states),
        "T_star": T_doc,
        "Pi_star": {str(s): env.Pi_star[s].T.tolist() for s in env.states},
        "identifiable_by_construction": env.identifiable_by_construction,
    }


def env_from_document(doc: dict) -> LatentEnv:
    try:
        space_doc = doc["space"]
        space = ObservationSpace(
            space_doc["kind"],
            size=int(space_doc.get("size", 0)),
            dim=int(space_doc.get("dim", 0)),
            grid=space_doc.get("grid"),
        )
        states = [int(s) for s in doc["states"]]
        if space.is_finite:
            T_star = {s: np.asarray(doc["T_star"][str(s)], dtype=float).T for s in states}
        else:
            T_star = {
                s: [distribution_from_dict(d) for d in doc["T_star"][str(s)]] for s in states
            }
        Pi_star = {s: np.asarray(doc["Pi_star"][str(s)], dtype=float).T for s in states}
        return LatentEnv(
            k=int(doc["k"]),
            m=int(doc["m"]),
            space=space,
            states=tuple(states),
            T_star=T_star,
            Pi_star=Pi_star,
            identifiable_by_construction=bool(doc.get("identifiable_by_construction", False)),
        )
    except KeyError as e:
        raise LatentActError(INVALID_PARAMS, f"environment document is missing {e}") from e
