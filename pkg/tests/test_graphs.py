"""Graph-layer tests.

Core claims: adjacency validation catches malformed input, both random
families emit DAGs with the advertised edge statistics, enumeration and the
closed-form count agree, and equivalence-class conversion matches a
brute-force grouping of all DAGs by (skeleton, colliders).
"""

import itertools

import numpy as np
import pytest

from dagsampler import graphs
from dagsampler.errors import ConfigError, CycleError, DataError

CHAIN3 = np.array([[0, 1, 0], [0, 0, 1], [0, 0, 0]])
COLLIDER3 = np.array([[0, 0, 1], [0, 0, 1], [0, 0, 0]])  # 0 -> 2 <- 1


class TestValidation:
    def test_rejects_non_square(self):
        with pytest.raises(DataError):
            graphs.is_acyclic(np.zeros((2, 3)))

    def test_rejects_non_binary(self):
        with pytest.raises(DataError):
            graphs.check_adjacency(np.full((2, 2), 0.5))

    def test_rejects_self_loop(self):
        with pytest.raises(DataError):
            graphs.check_adjacency(np.eye(2, dtype=int))


class TestAcyclicity:
    def test_empty_and_chain(self):
        assert graphs.is_acyclic(np.zeros((4, 4), dtype=int))
        assert graphs.is_acyclic(CHAIN3)

    def test_two_cycle(self):
        G = np.array([[0, 1], [1, 0]])
        assert not graphs.is_acyclic(G)

    def test_topological_order_respects_edges(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            G = graphs.sample_er_dag(8, 10, rng)
            order = graphs.topological_order(G)
            pos = np.empty(8, dtype=int)
            pos[order] = np.arange(8)
            for i, j in zip(*np.nonzero(G)):
                assert pos[i] < pos[j]

    def test_cycle_error_names_an_edge(self):
        G = np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0]])
        with pytest.raises(CycleError, match=r"\d+->\d+"):
            graphs.topological_order(G)


class TestErdosRenyi:
    def test_always_acyclic(self):
        rng = np.random.default_rng(0)
        for d, ee in [(2, 1), (5, 5), (10, 20), (30, 60)]:
            for _ in range(20):
                assert graphs.is_acyclic(graphs.sample_er_dag(d, ee, rng))

    def test_mean_edge_count(self):
        rng = np.random.default_rng(1)
        counts = [graphs.sample_er_dag(5, 5, rng).sum() for _ in range(10_000)]
        assert abs(np.mean(counts) - 5.0) < 0.2

    def test_too_many_edges_rejected(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ConfigError):
            graphs.sample_er_dag(5, 11, rng)


class TestScaleFree:
    def test_tree_at_m1(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            G = graphs.sample_sf_dag(5, 1, rng)
            assert G.sum() == 4
            assert graphs.is_acyclic(G)

    def test_edge_count_m2(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            G = graphs.sample_sf_dag(10, 2, rng)
            assert G.sum() == 2 * (10 - 2) + 1
            assert graphs.is_acyclic(G)

    def test_m_bounds(self):
        rng = np.random.default_rng(5)
        with pytest.raises(ConfigError):
            graphs.sample_sf_dag(4, 4, rng)
        with pytest.raises(ConfigError):
            graphs.sample_sf_dag(4, 0, rng)

    def test_heavier_tail_than_er(self):
        # matched edge counts at d=50; attachment should concentrate degree
        rng = np.random.default_rng(6)
        d = 50
        sf_edges = 2 * (d - 2) + 1
        sf_max, er_max = [], []
        for _ in range(1000):
            Gs = graphs.sample_sf_dag(d, 2, rng)
            Ge = graphs.sample_er_dag(d, sf_edges, rng)
            sf_max.append((Gs + Gs.T).sum(axis=0).max())
            er_max.append((Ge + Ge.T).sum(axis=0).max())
        assert np.mean(sf_max) > np.mean(er_max)

    def test_family_dispatch(self):
        rng = np.random.default_rng(8)
        fam = graphs.GraphFamily("sf", 10, 20)
        assert fam.sample(rng).sum() == 17
        with pytest.raises(ConfigError):
            graphs.GraphFamily("chordal", 5, 5)


class TestCounting:
    def test_robinson_values(self):
        assert [graphs.count_dags(k) for k in range(6)] == [1, 1, 3, 25, 543, 29281]
        assert graphs.count_dags(8) == 783702329343

    def test_count_cap(self):
        with pytest.raises(ConfigError):
            graphs.count_dags(9)

    def test_enumeration_matches_count(self):
        for d in range(1, 5):
            dags = graphs.enumerate_dags(d)
            assert len(dags) == graphs.count_dags(d)
            keys = {G.tobytes() for G in dags}
            assert len(keys) == len(dags)
            assert all(graphs.is_acyclic(G) for G in dags)

    def test_enumeration_cap(self):
        with pytest.raises(ConfigError):
            graphs.enumerate_dags(6)


def _collider_triples(G):
    d = len(G)
    out = set()
    for k in range(d):
        parents = np.flatnonzero(G[:, k])
        for i, j in itertools.combinations(parents, 2):
            if not (G[i, j] or G[j, i]):
                out.add((min(i, j), max(i, j), k))
    return frozenset(out)


def _oracle_classes(d):
    """Group all DAGs by (skeleton, colliders); the class representative's
    compelled edges are those oriented identically in every member."""
    classes = {}
    for G in graphs.enumerate_dags(d):
        key = (((G + G.T) > 0).astype(int).tobytes(), _collider_triples(G))
        classes.setdefault(key, []).append(G)
    return classes


class TestCpdag:
    def test_chain_fully_reversible(self):
        c = graphs.to_cpdag(CHAIN3)
        assert c.directed.sum() == 0
        assert np.array_equal(c.undirected, ((CHAIN3 + CHAIN3.T) > 0).astype(int))

    def test_collider_fully_compelled(self):
        c = graphs.to_cpdag(COLLIDER3)
        assert np.array_equal(c.directed, COLLIDER3)
        assert c.undirected.sum() == 0

    def test_single_edge_reversible(self):
        c = graphs.to_cpdag(np.array([[0, 1], [0, 0]]))
        assert c.directed.sum() == 0
        assert c.undirected.sum() == 2

    def test_rejects_cycle(self):
        with pytest.raises(CycleError):
            graphs.to_cpdag(np.array([[0, 1], [1, 0]]))

    @pytest.mark.parametrize("d", [2, 3, 4])
    def test_matches_brute_force_classes(self, d):
        for members in _oracle_classes(d).values():
            stack = np.stack(members)
            compelled = stack.min(axis=0)
            ever = (stack.max(axis=0) + stack.max(axis=0).T) > 0
            reversible = ever.astype(int) - (compelled + compelled.T)
            for G in members:
                c = graphs.to_cpdag(G)
                assert np.array_equal(c.directed, compelled)
                assert np.array_equal(c.undirected, reversible)

    def test_same_class_same_cpdag(self):
        a = graphs.to_cpdag(CHAIN3)
        reversed_chain = CHAIN3.T.copy()
        b = graphs.to_cpdag(reversed_chain)
        assert np.array_equal(a.directed, b.directed)
        assert np.array_equal(a.undirected, b.undirected)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        G = graphs.sample_er_dag(6, 8, rng)
        path = tmp_path / "g.json"
        graphs.save_graph(path, G)
        assert np.array_equal(graphs.load_graph(path), G)

    def test_dict_shape_mismatch(self):
        with pytest.raises(DataError):
            graphs.graph_from_dict({"d": 3, "adjacency": [[0, 1], [0, 0]]})

    def test_dict_missing_field(self):
        with pytest.raises(DataError):
            graphs.graph_from_dict({"adjacency": [[0]]})
