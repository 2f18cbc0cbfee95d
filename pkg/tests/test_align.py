"""
Tests for identify.align: graph helpers, BFS label propagation, anchoring and
the global-condition audit.
"""

import numpy as np
import pytest

from identify.align import (
    AlignOptions,
    StateGraph,
    StatewiseFactorization,
    align_statewise,
    apply_anchor,
    audit_global_conditions,
    grid_graph,
    knn_graph,
    path_graph,
    resolve_anchor,
    separation_margin,
)
from identify.embedding import Kernel, dirac
from identify.env_core import AnchorDataset, sample_anchors
from utils.errors import DIMENSION_MISMATCH, INVALID_PARAMS, MARGIN_VIOLATION, LatentActError
from utils.rng import stream

UNIT_1D = Kernel.gaussian(1.0, 1)
UNIT_2D = Kernel.gaussian(1.0, 2)

PI_TRUE = np.array(
    [
        [0.8, 0.1, 0.1],
        [0.1, 0.8, 0.1],
        [0.1, 0.1, 0.8],
    ]
)


def _inverse(perm) -> np.ndarray:
    return np.argsort(np.asarray(perm))


def _shuffles(states, k, seed=0) -> dict:
    return {s: stream(seed, "test-align", s).permutation(k) for s in states}


def _drifting_facts(states, shuffles, Pi=PI_TRUE, drift=0.01) -> StatewiseFactorization:
    """Three Dirac actions 3 apart, drifting slowly with the state id."""
    transitions, policies = {}, {}
    for s in states:
        true = [dirac([3.0 * a + drift * s]) for a in range(3)]
        transitions[s] = [true[j] for j in shuffles[s]]
        policies[s] = Pi[shuffles[s], :]
    return StatewiseFactorization(transitions, policies, UNIT_1D)


def _env_facts(env, shuffles) -> StatewiseFactorization:
    return StatewiseFactorization(
        transitions={s: [env.T_star[s][j] for j in shuffles[s]] for s in env.states},
        Pi={s: env.Pi_star[s][shuffles[s], :] for s in env.states},
        kernel=UNIT_2D,
    )


# ── graphs ─────────────────────────────────────────────────────────────────


@pytest.mark.unit
class TestGraphs:

    def test_path_edges(self):
        assert path_graph(4).edges == ((0, 1), (1, 2), (2, 3))

    def test_grid_edge_count(self):
        assert len(grid_graph(3, 4).edges) == 3 * 3 + 2 * 4

    def test_split_path_has_two_components(self):
        graph = path_graph(6).without_edge(2, 3)
        assert graph.components() == [[0, 1, 2], [3, 4, 5]]
        assert not graph.is_connected

    def test_knn_on_a_line_is_connected(self):
        graph = knn_graph(np.linspace(0, 1, 10)[:, None], n_neighbors=1)
        assert graph.is_connected

    def test_unknown_node_rejected(self):
        with pytest.raises(LatentActError) as exc:
            StateGraph((0, 1), ((0, 2),))
        assert exc.value.code == INVALID_PARAMS

    def test_self_loops_and_duplicates_dropped(self):
        graph = StateGraph((0, 1), ((1, 0), (0, 1), (1, 1)))
        assert graph.edges == ((0, 1),)

    @pytest.mark.parametrize("kwargs", [{"graph": "ring"}, {"n_neighbors": 0}, {"num_anchors": -1}])
    def test_invalid_options(self, kwargs):
        with pytest.raises(LatentActError):
            AlignOptions(**kwargs)


# ── propagation ────────────────────────────────────────────────────────────


@pytest.mark.unit
class TestAlignStatewise:

    def test_every_root_recovers_relative_labels(self):
        states = list(range(20))
        shuffles = _shuffles(states, 3)
        facts = _drifting_facts(states, shuffles)
        graph = path_graph(20)
        for root in states:
            assignment = align_statewise(facts, graph, root)
            assert assignment.roots == [root]
            for s in states:
                expected = _inverse(shuffles[s])[shuffles[root]]
                assert list(assignment.perms[s]) == expected.tolist()

    def test_root_perm_is_identity(self):
        states = list(range(5))
        facts = _drifting_facts(states, _shuffles(states, 3))
        assignment = align_statewise(facts, path_graph(5), root=2)
        assert assignment.perms[2] == (0, 1, 2)
        assert assignment.is_global

    def test_smooth_path_environment(self, path_env):
        shuffles = _shuffles(path_env.states, path_env.k, seed=1)
        facts = _env_facts(path_env, shuffles)
        assignment = align_statewise(facts, path_graph(len(path_env.states)))
        assert all(e["passed"] for e in assignment.edge_report)
        for s in path_env.states:
            assert list(assignment.perms[s]) == _inverse(shuffles[s])[shuffles[0]].tolist()

    def test_grid_non_tree_edges_agree(self):
        states = list(range(9))
        facts = _drifting_facts(states, _shuffles(states, 3, seed=5))
        assignment = align_statewise(facts, grid_graph(3, 3))
        assert assignment.inconsistent_edges == []
        # every edge of the grid is certified, tree or not
        assert len(assignment.edge_report) == len(grid_graph(3, 3).edges)

    def test_collision_raises_margin_violation(self):
        transitions = {
            0: [dirac([0.0]), dirac([0.0]), dirac([3.0])],
            1: [dirac([0.0]), dirac([3.0]), dirac([6.0])],
        }
        facts = StatewiseFactorization(transitions, {0: PI_TRUE, 1: PI_TRUE}, UNIT_1D)
        assert separation_margin(facts, 0) == pytest.approx(0.0)
        with pytest.raises(LatentActError) as exc:
            align_statewise(facts, path_graph(2))
        assert exc.value.code == MARGIN_VIOLATION
        assert exc.value.details["edge"] == [0, 1]

    def test_large_jump_fails_certificate(self):
        transitions = {
            0: [dirac([0.0]), dirac([3.0]), dirac([6.0])],
            1: [dirac([1.4]), dirac([4.4]), dirac([7.4])],
        }
        facts = StatewiseFactorization(transitions, {0: PI_TRUE, 1: PI_TRUE}, UNIT_1D)
        with pytest.raises(LatentActError) as exc:
            align_statewise(facts, path_graph(2))
        assert exc.value.code == MARGIN_VIOLATION

    def test_split_graph_is_not_global(self):
        states = list(range(6))
        facts = _drifting_facts(states, _shuffles(states, 3))
        assignment = align_statewise(facts, path_graph(6).without_edge(2, 3))
        assert not assignment.is_global
        assert assignment.roots == [0, 3]
        assert assignment.perms[3] == (0, 1, 2)

    def test_graph_must_cover_states(self):
        facts = _drifting_facts([0, 1], _shuffles([0, 1], 3))
        with pytest.raises(LatentActError) as exc:
            align_statewise(facts, path_graph(3))
        assert exc.value.code == INVALID_PARAMS

    def test_inconsistent_action_counts(self):
        with pytest.raises(LatentActError) as exc:
            StatewiseFactorization(
                {0: [dirac([0.0])], 1: [dirac([0.0]), dirac([1.0])]},
                {0: np.ones((1, 2)), 1: np.full((2, 2), 0.5)},
                UNIT_1D,
            )
        assert exc.value.code == DIMENSION_MISMATCH

    def test_single_action_margin_is_infinite(self):
        facts = StatewiseFactorization({0: [dirac([0.0])]}, {0: np.ones((1, 2))}, UNIT_1D)
        assert separation_margin(facts, 0) == float("inf")


# ── anchors ────────────────────────────────────────────────────────────────


@pytest.mark.unit
class TestAnchors:

    def _setup(self, Pi=PI_TRUE):
        states = list(range(8))
        shuffles = _shuffles(states, 3, seed=2)
        facts = _drifting_facts(states, shuffles, Pi=Pi)
        return shuffles, facts, align_statewise(facts, path_graph(8), root=4)

    def test_sigma_undoes_root_shuffle(self):
        shuffles, facts, assignment = self._setup()
        anchors = AnchorDataset(o=[0, 3, 7, 5], e=[0, 1, 2, 1], a_star=[0, 1, 2, 1])
        resolution = resolve_anchor(facts, assignment, anchors)
        assert not resolution.tie
        assert list(resolution.sigma) == _inverse(shuffles[4]).tolist()
        assert resolution.confidence > 0

    def test_applied_anchor_recovers_true_labels_for_every_root(self):
        states = list(range(8))
        shuffles = _shuffles(states, 3, seed=2)
        facts = _drifting_facts(states, shuffles)
        anchors = AnchorDataset(o=[1, 2, 6], e=[0, 1, 2], a_star=[0, 1, 2])
        for root in (0, 3, 7):
            assignment = align_statewise(facts, path_graph(8), root)
            resolution = resolve_anchor(facts, assignment, anchors)
            resolved = apply_anchor(assignment, resolution.sigma, resolution.confidence)
            assert resolved.anchor_resolved
            for s in states:
                assert list(resolved.perms[s]) == _inverse(shuffles[s]).tolist()

    def test_uninformative_anchors_tie(self):
        _, facts, assignment = self._setup(Pi=np.full((3, 3), 1 / 3))
        anchors = AnchorDataset(o=[0, 1], e=[0, 1], a_star=[0, 1])
        resolution = resolve_anchor(facts, assignment, anchors)
        assert resolution.tie
        assert resolution.sigma is None
        assert len(resolution.tied) == 6

    def test_sampled_anchors_on_smooth_path(self, path_env):
        shuffles = _shuffles(path_env.states, path_env.k, seed=4)
        facts = _env_facts(path_env, shuffles)
        assignment = align_statewise(facts, path_graph(len(path_env.states)))
        anchors = sample_anchors(path_env, 30, seed=4)
        resolution = resolve_anchor(facts, assignment, anchors)
        assert list(resolution.sigma) == _inverse(shuffles[0]).tolist()

    def test_disconnected_assignment_rejected(self):
        states = list(range(6))
        facts = _drifting_facts(states, _shuffles(states, 3))
        assignment = align_statewise(facts, path_graph(6).without_edge(2, 3))
        anchors = AnchorDataset(o=[0], e=[0], a_star=[0])
        with pytest.raises(LatentActError) as exc:
            resolve_anchor(facts, assignment, anchors)
        assert exc.value.code == INVALID_PARAMS

    def test_empty_anchor_set_rejected(self):
        _, facts, assignment = self._setup()
        with pytest.raises(LatentActError):
            resolve_anchor(facts, assignment, AnchorDataset(o=[], e=[], a_star=[]))

    def test_apply_anchor_needs_a_permutation(self):
        _, _, assignment = self._setup()
        with pytest.raises(LatentActError):
            apply_anchor(assignment, [0, 0, 1])


# ── audit ──────────────────────────────────────────────────────────────────


@pytest.mark.unit
class TestAudit:

    def test_clean_path_passes(self):
        states = list(range(6))
        facts = _drifting_facts(states, _shuffles(states, 3))
        report = audit_global_conditions(facts, path_graph(6))
        assert report.all_pass
        assert report.connected
        assert report.policy_ranks == {s: 3 for s in states}

    def test_split_graph_fails_connectivity(self):
        states = list(range(6))
        facts = _drifting_facts(states, _shuffles(states, 3))
        report = audit_global_conditions(facts, path_graph(6).without_edge(2, 3))
        assert not report.all_pass
        assert report.num_components == 2

    def test_rank_deficient_policy_fails(self):
        states = list(range(3))
        facts = _drifting_facts(states, _shuffles(states, 3), Pi=np.full((3, 3), 1 / 3))
        report = audit_global_conditions(facts, path_graph(3))
        assert not report.all_pass
        assert set(report.policy_ranks.values()) == {1}

    def test_report_serializes_state_keys(self):
        states = list(range(3))
        facts = _drifting_facts(states, _shuffles(states, 3))
        doc = audit_global_conditions(facts, path_graph(3)).to_dict()
        assert set(doc["margins"]) == {"0", "1", "2"}
