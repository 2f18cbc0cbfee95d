"""
Global alignment of statewise action labels, and anchoring.

Each state's factorization is identified only up to its own permutation.
Labels are propagated over a StateGraph by breadth-first search: at every edge
the child's transitions are matched to the parent's by the least total MMD.
A matching is certified when every matched distance is below half the
smaller separation margin of its two endpoints.

Permutation convention: perms[s][c] is the column of state s's recovered
factorization that carries canonical label c.
"""

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from config import logger
from utils.errors import (
    DIMENSION_MISMATCH,
    INVALID_PARAMS,
    MARGIN_VIOLATION,
    LatentActError,
)

from .embedding import Kernel, mmd_matrix
from .env_core import AnchorDataset
from .nmf_minvol import all_permutations, numerical_rank
from .stochastic import as_stochastic

# Log-likelihood gaps at or below this count as ties between permutations.
TIE_TOL = 1e-9
_LOG_FLOOR = 1e-300


# ── types ───────────────────────────────────────────────────────────────────


@dataclass(frozen=True, eq=False)
class StateGraph:
    nodes: tuple
    edges: tuple

    def __post_init__(self):
        nodes = tuple(int(v) for v in self.nodes)
        if len(set(nodes)) != len(nodes):
            raise LatentActError(INVALID_PARAMS, "graph nodes must be distinct")
        known = set(nodes)
        edges = []
        for u, v in self.edges:
            u, v = int(u), int(v)
            if u not in known or v not in known:
                raise LatentActError(INVALID_PARAMS, f"edge ({u}, {v}) references an unknown node")
            if u != v:
                edges.append((min(u, v), max(u, v)))
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", tuple(sorted(set(edges))))

    def neighbors(self) -> dict:
        adjacency = {v: [] for v in self.nodes}
        for u, v in self.edges:
            adjacency[u].append(v)
            adjacency[v].append(u)
        return {v: sorted(ns) for v, ns in adjacency.items()}

    def components(self) -> list[list[int]]:
        """Connected components, each sorted, ordered by smallest node."""
        index = {v: i for i, v in enumerate(self.nodes)}
        n = len(self.nodes)
        rows = [index[u] for u, _ in self.edges]
        cols = [index[v] for _, v in self.edges]
        adjacency = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        _, labels = connected_components(adjacency, directed=False)
        groups: dict[int, list[int]] = {}
        for v, label in zip(self.nodes, labels):
            groups.setdefault(int(label), []).append(v)
        return sorted((sorted(g) for g in groups.values()), key=lambda g: g[0])

    @property
    def is_connected(self) -> bool:
        return len(self.components()) == 1

    def without_edge(self, u: int, v: int) -> "StateGraph":
        drop = (min(u, v), max(u, v))
        return StateGraph(self.nodes, tuple(e for e in self.edges if e != drop))

    def to_dict(self) -> dict:
        return {"nodes": list(self.nodes), "edges": [list(e) for e in self.edges]}


def path_graph(num_nodes: int) -> StateGraph:
    return StateGraph(tuple(range(num_nodes)), tuple((i, i + 1) for i in range(num_nodes - 1)))


def grid_graph(rows: int, cols: int) -> StateGraph:
    """4-neighbour grid; node id r * cols + c."""
    edges = []
    for r in range(rows):
        for c in range(cols):
            v = r * cols + c
            if c + 1 < cols:
                edges.append((v, v + 1))
            if r + 1 < rows:
                edges.append((v, v + cols))
    return StateGraph(tuple(range(rows * cols)), tuple(edges))


def knn_graph(points, n_neighbors: int = 2) -> StateGraph:
    """Symmetrized k-nearest-neighbour graph in Euclidean distance."""
    points = np.asarray(points, dtype=float)
    points = points.reshape(len(points), -1)
    if n_neighbors < 1:
        raise LatentActError(INVALID_PARAMS, "n_neighbors must be >= 1")
    count = min(n_neighbors + 1, len(points))
    _, idx = cKDTree(points).query(points, k=count)
    idx = np.asarray(idx).reshape(len(points), -1)
    edges = [(i, int(j)) for i in range(len(points)) for j in idx[i, 1:]]
    return StateGraph(tuple(range(len(points))), tuple(edges))


@dataclass(frozen=True, eq=False)
class StatewiseFactorization:
    # state -> list of k recovered transition laws
    transitions: dict
    # state -> (k x m) recovered policy
    Pi: dict
    kernel: Kernel

    def __post_init__(self):
        if set(self.transitions) != set(self.Pi):
            raise LatentActError(DIMENSION_MISMATCH, "transitions and Pi cover different states")
        sizes = {len(v) for v in self.transitions.values()}
        if len(sizes) != 1:
            raise LatentActError(DIMENSION_MISMATCH, f"action counts differ across states: {sizes}")
        shapes = {np.shape(p) for p in self.Pi.values()}
        if len(shapes) != 1:
            raise LatentActError(DIMENSION_MISMATCH, f"policy shapes differ across states: {shapes}")
        k = sizes.pop()
        if shapes.pop()[0] != k:
            raise LatentActError(DIMENSION_MISMATCH, "policy rows do not match action count")
        object.__setattr__(
            self, "Pi", {s: as_stochastic(p, name=f"Pi[{s}]") for s, p in self.Pi.items()}
        )

    @property
    def k(self) -> int:
        return len(next(iter(self.transitions.values())))

    @property
    def states(self) -> list[int]:
        return sorted(self.transitions)

    def margins(self) -> dict:
        return {s: separation_margin(self, s) for s in self.states}

    def relabeled(self, perms: dict) -> "StatewiseFactorization":
        """Columns reordered so that label c at state s is old column perms[s][c]."""
        return StatewiseFactorization(
            transitions={s: [self.transitions[s][j] for j in perms[s]] for s in self.states},
            Pi={s: self.Pi[s][list(perms[s]), :] for s in self.states},
            kernel=self.kernel,
        )


@dataclass
class PermutationAssignment:
    perms: dict
    is_global: bool
    anchor_resolved: bool = False
    components: list = field(default_factory=list)
    roots: list = field(default_factory=list)
    edge_report: list = field(default_factory=list)
    inconsistent_edges: list = field(default_factory=list)
    sigma: tuple | None = None
    confidence: float | None = None

    def to_dict(self) -> dict:
        return {
            "perms": {str(s): list(p) for s, p in sorted(self.perms.items())},
            "global": self.is_global,
            "anchor_resolved": self.anchor_resolved,
            "components": self.components,
            "roots": self.roots,
            "inconsistent_edges": self.inconsistent_edges,
            "sigma": None if self.sigma is None else list(self.sigma),
            "confidence": self.confidence,
        }


@dataclass
class AnchorResolution:
    sigma: tuple | None
    confidence: float
    tie: bool
    tied: list
    log_likelihood: float

    def to_dict(self) -> dict:
        return {
            "sigma": None if self.sigma is None else list(self.sigma),
            "confidence": self.confidence,
            "tie": self.tie,
            "tied": [list(t) for t in self.tied],
            "log_likelihood": self.log_likelihood,
        }


@dataclass(frozen=True)
class AlignOptions:
    root: int | None = None
    graph: str = "path"
    n_neighbors: int = 2
    num_anchors: int = 20
    # drop this path edge to build a two-component variant
    split_after: int | None = None
    shuffle: bool = True

    def __post_init__(self):
        if self.graph not in ("path", "knn"):
            raise LatentActError(INVALID_PARAMS, f"unknown graph kind {self.graph!r}")
        if self.n_neighbors < 1:
            raise LatentActError(INVALID_PARAMS, "n_neighbors must be >= 1")
        if self.num_anchors < 0:
            raise LatentActError(INVALID_PARAMS, "num_anchors must be >= 0")


# ── margins and matching ────────────────────────────────────────────────────


def separation_margin(facts: StatewiseFactorization, o: int, kernel: Kernel | None = None) -> float:
    """Least MMD between two distinct recovered transitions at o; +inf for k < 2."""
    kernel = kernel or facts.kernel
    dists = facts.transitions[o]
    if len(dists) < 2:
        logger.warning(f"separation margin at state {o} is vacuous for k < 2")
        return float("inf")
    D = mmd_matrix(dists, dists, kernel)
    return float(D[~np.eye(len(dists), dtype=bool)].min())


def _match(parent: list, child: list, kernel: Kernel) -> tuple[np.ndarray, np.ndarray]:
    """sigma with parent column c matched to child column sigma[c], by least
    total MMD; returns (sigma, matched distances)."""
    cost = mmd_matrix(parent, child, kernel)
    k = len(parent)
    perms = all_permutations(k)
    totals = cost[np.arange(k), perms].sum(axis=1)
    sigma = perms[int(np.argmin(totals))]
    return sigma, cost[np.arange(k), sigma]


def _edge_entry(u, v, distances, threshold) -> dict:
    worst = float(distances.max()) if distances.size else 0.0
    return {
        "edge": [u, v],
        "max_cost": worst,
        "threshold": threshold,
        "passed": bool(worst < threshold),
    }


def align_statewise(
    facts: StatewiseFactorization, graph: StateGraph, root: int | None = None
) -> PermutationAssignment:
    """Propagate labels by BFS from root over every component of the graph.

    Raises MARGIN_VIOLATION naming the first edge (tree or not) whose matched
    distances are not all below min(margin(u), margin(v)) / 2.
    """
    missing = sorted(set(graph.nodes) ^ set(facts.states))
    if missing:
        raise LatentActError(
            INVALID_PARAMS, f"graph and factorization cover different states: {missing}"
        )
    if root is not None and root not in facts.transitions:
        raise LatentActError(INVALID_PARAMS, f"root {root} is not a state")
    k = facts.k
    margins = facts.margins()
    adjacency = graph.neighbors()
    components = graph.components()
    if root is not None:
        components.sort(key=lambda comp: root not in comp)
    perms: dict[int, np.ndarray] = {}
    roots = []
    edge_report = []
    tree_edges = set()

    def certify(u, v, distances):
        threshold = min(margins[u], margins[v]) / 2.0
        entry = _edge_entry(u, v, distances, threshold)
        edge_report.append(entry)
        if not entry["passed"]:
            raise LatentActError(
                MARGIN_VIOLATION,
                f"edge ({u}, {v}): matched distance {entry['max_cost']:.4e} "
                f">= half margin {threshold:.4e}",
                edge=[u, v],
                max_cost=entry["max_cost"],
                threshold=threshold,
            )

    for comp in components:
        start = root if root in comp else comp[0]
        roots.append(start)
        perms[start] = np.arange(k)
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for v in adjacency[u]:
                if v in perms:
                    continue
                sigma, distances = _match(facts.transitions[u], facts.transitions[v], facts.kernel)
                certify(u, v, distances)
                perms[v] = sigma[perms[u]]
                tree_edges.add((min(u, v), max(u, v)))
                queue.append(v)

    inconsistent = []
    for u, v in graph.edges:
        if (u, v) in tree_edges:
            continue
        sigma, distances = _match(facts.transitions[u], facts.transitions[v], facts.kernel)
        certify(u, v, distances)
        if not np.array_equal(sigma[perms[u]], perms[v]):
            inconsistent.append([u, v])
    if inconsistent:
        logger.warning(f"{len(inconsistent)} non-tree edges disagree with the BFS labels")

    is_global = len(components) == 1
    logger.info(
        f"aligned {len(perms)} states over {len(components)} component(s); global={is_global}"
    )
    return PermutationAssignment(
        perms={s: tuple(int(x) for x in p) for s, p in sorted(perms.items())},
        is_global=is_global,
        components=components,
        roots=roots,
        edge_report=edge_report,
        inconsistent_edges=inconsistent,
    )


# ── anchoring ───────────────────────────────────────────────────────────────


def resolve_anchor(
    facts: StatewiseFactorization,
    assignment: PermutationAssignment,
    anchors: AnchorDataset,
) -> AnchorResolution:
    """Sigma (true label -> canonical label) maximizing
    sum_j log Pi_aligned(o_j)[Sigma(a_j*), e_j]; confidence is the gap to the
    runner-up. Ties are reported with sigma = None."""
    if len(anchors) == 0:
        raise LatentActError(INVALID_PARAMS, "anchor set is empty")
    if not assignment.is_global:
        raise LatentActError(
            INVALID_PARAMS, "anchors resolve a single global assignment; graph is disconnected"
        )
    k = facts.k
    m = next(iter(facts.Pi.values())).shape[1]
    anchors.validate(k, m)
    unknown = sorted(set(anchors.o.tolist()) - set(assignment.perms))
    if unknown:
        raise LatentActError(INVALID_PARAMS, f"anchors reference unaligned states {unknown}")
    # logp[j, c]: log prob of canonical label c at anchor j
    logp = np.array(
        [
            np.log(np.maximum(facts.Pi[o][list(assignment.perms[o]), e], _LOG_FLOOR))
            for o, e in zip(anchors.o, anchors.e)
        ]
    )
    perms = all_permutations(k)
    scores = logp[np.arange(len(anchors))[None, :], perms[:, anchors.a_star]].sum(axis=1)
    order = np.argsort(-scores, kind="stable")
    best = float(scores[order[0]])
    runner_up = float(scores[order[1]]) if len(order) > 1 else -np.inf
    confidence = best - runner_up
    tied = [tuple(int(x) for x in perms[i]) for i in order if best - scores[i] <= TIE_TOL]
    if len(tied) > 1:
        logger.warning(f"anchors leave {len(tied)} permutations tied")
        return AnchorResolution(None, 0.0, True, tied, best)
    return AnchorResolution(tied[0], float(confidence), False, [], best)


def apply_anchor(assignment: PermutationAssignment, sigma, confidence: float | None = None):
    """Re-key every state so that label a is the anchor-stated action a."""
    sigma = np.asarray(sigma, dtype=int)
    if sorted(sigma.tolist()) != list(range(len(sigma))):
        raise LatentActError(INVALID_PARAMS, f"sigma {sigma.tolist()} is not a permutation")
    return PermutationAssignment(
        perms={s: tuple(int(x) for x in np.asarray(p)[sigma]) for s, p in assignment.perms.items()},
        is_global=assignment.is_global,
        anchor_resolved=True,
        components=assignment.components,
        roots=assignment.roots,
        edge_report=assignment.edge_report,
        inconsistent_edges=assignment.inconsistent_edges,
        sigma=tuple(int(x) for x in sigma),
        confidence=confidence,
    )


# ── audit ───────────────────────────────────────────────────────────────────


@dataclass
class GlobalConditionReport:
    connected: bool
    num_components: int
    margins: dict
    min_margin: float
    edges: list
    policy_ranks: dict
    all_pass: bool

    def to_dict(self) -> dict:
        return {
            "connected": self.connected,
            "num_components": self.num_components,
            "margins": {str(s): v for s, v in self.margins.items()},
            "min_margin": self.min_margin,
            "edges": self.edges,
            "policy_ranks": {str(s): r for s, r in self.policy_ranks.items()},
            "all_pass": self.all_pass,
        }


def audit_global_conditions(
    facts: StatewiseFactorization, graph: StateGraph
) -> GlobalConditionReport:
    """Report connectivity, no-collision margins, per-edge matching costs
    against the half-margin certificate, and per-state policy rank."""
    margins = facts.margins()
    edges = []
    for u, v in graph.edges:
        _, distances = _match(facts.transitions[u], facts.transitions[v], facts.kernel)
        edges.append(_edge_entry(u, v, distances, min(margins[u], margins[v]) / 2.0))
    ranks = {s: numerical_rank(facts.Pi[s]) for s in facts.states}
    components = graph.components()
    all_pass = (
        len(components) == 1
        and all(v > 0 for v in margins.values())
        and all(e["passed"] for e in edges)
        and all(r == facts.k for r in ranks.values())
    )
    return GlobalConditionReport(
        connected=len(components) == 1,
        num_components=len(components),
        margins=margins,
        min_margin=float(min(margins.values())),
        edges=edges,
        policy_ranks=ranks,
        all_pass=all_pass,
    )
