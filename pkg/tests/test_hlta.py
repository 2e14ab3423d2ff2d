import math

import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from cofrec import ltm, synthetic
from cofrec.hlta import (HierarchyConfig, build_hierarchy, build_level, hierarchy_report, mst_connect,
                         pairwise_mi, sibling_clusters)
from cofrec.ingest import InteractionMatrix


def mi_matrix(n, pairs):
    mi = np.zeros((n, n))
    for (a, b), w in pairs.items():
        mi[a, b] = mi[b, a] = w
    return mi


class TestPairwiseMI:
    def test_independent_columns(self, rng):
        X = rng.random((10_000, 2)) < 0.3
        assert pairwise_mi(X)[0, 1] < 1e-3

    def test_identical_columns(self, rng):
        col = rng.random(100_000) < 0.5
        X = np.column_stack([col, col])
        assert pairwise_mi(X)[0, 1] == pytest.approx(math.log(2), abs=1e-3)

    def test_symmetric_nonnegative(self, rng):
        X = rng.random((300, 6)) < rng.uniform(0.05, 0.6, size=6)
        mi = pairwise_mi(X)
        np.testing.assert_allclose(mi, mi.T, atol=1e-15)
        assert mi.min() >= 0 and np.all(np.diag(mi) == 0)

    def test_sparse_input_matches_dense(self, rng):
        X = (rng.random((200, 5)) < 0.2).astype(np.int8)
        np.testing.assert_allclose(pairwise_mi(InteractionMatrix.from_dense(X)), pairwise_mi(X), atol=1e-12)

    def test_add_one_smoothing_by_hand(self):
        # n=4, both columns [1,1,0,0]: smoothed cells (3,1,1,3)/8, marginals 1/2
        X = np.array([[1, 1], [1, 1], [0, 0], [0, 0]])
        want = 2 * (3 / 8) * math.log((3 / 8) / 0.25) + 2 * (1 / 8) * math.log((1 / 8) / 0.25)
        assert pairwise_mi(X)[0, 1] == pytest.approx(want, abs=1e-12)


class TestSiblingClusters:
    def test_two_pairs(self):
        mi = mi_matrix(4, {(0, 1): 0.5, (2, 3): 0.4})
        assert sibling_clusters(mi, 2) == [[0, 1], [2, 3]]

    def test_all_fit_in_one(self):
        mi = mi_matrix(3, {(0, 1): 0.3, (1, 2): 0.2, (0, 2): 0.1})
        assert sorted(sibling_clusters(mi, 5)[0]) == [0, 1, 2]

    def test_leftover_joins_best_partner(self):
        mi = mi_matrix(5, {(0, 1): 0.5, (2, 3): 0.4, (4, 3): 0.3, (4, 0): 0.1})
        clusters = sibling_clusters(mi, 2)
        assert clusters == [[0, 1], [2, 3, 4]]

    def test_growth_ratio_stops_weak_members(self):
        mi = mi_matrix(4, {(0, 1): 0.5, (0, 2): 0.05, (1, 2): 0.05, (2, 3): 0.3})
        assert sibling_clusters(mi, 4, min_growth_ratio=0.5) == [[0, 1], [2, 3]]
        assert len(sibling_clusters(mi, 4, min_growth_ratio=0.0)) == 1

    def test_partition(self, rng):
        for _ in range(20):
            n = int(rng.integers(2, 30))
            mi = rng.random((n, n))
            mi = (mi + mi.T) / 2
            clusters = sibling_clusters(mi, int(rng.integers(2, 6)), float(rng.uniform(0, 1)))
            flat = sorted(v for cl in clusters for v in cl)
            assert flat == list(range(n))
            assert all(len(cl) >= 2 for cl in clusters)

    def test_needs_two(self):
        with pytest.raises(ValueError):
            sibling_clusters(np.zeros((1, 1)), 3)


class TestMST:
    def test_hand_example(self):
        mi = mi_matrix(3, {(0, 1): 0.5, (0, 2): 0.3, (1, 2): 0.1})
        assert sorted(map(sorted, mst_connect(mi, ["a", "b", "c"]))) == [["a", "b"], ["a", "c"]]

    def test_singleton(self):
        assert mst_connect(np.zeros((1, 1)), ["a"]) == []

    def test_equal_weights_deterministic(self):
        mi = np.ones((4, 4))
        assert mst_connect(mi, list("abcd")) == [("a", "b"), ("a", "c"), ("a", "d")]

    def test_is_maximum(self, rng):
        import networkx as nx
        for _ in range(10):
            n = int(rng.integers(2, 9))
            mi = rng.random((n, n))
            mi = (mi + mi.T) / 2
            ids = [str(k) for k in range(n)]
            edges = mst_connect(mi, ids)
            g = nx.Graph()
            for a in range(n):
                for b in range(a + 1, n):
                    g.add_edge(a, b, weight=mi[a, b])
            best = nx.maximum_spanning_tree(g).size(weight="weight")
            assert sum(mi[int(a), int(b)] for a, b in edges) == pytest.approx(best, abs=1e-12)


def planted_two_blocks(n=10_000, seed=0):
    m = synthetic.planted_hierarchy(n_blocks=2, block_size=3, on=0.9, off=0.05)
    return ltm.sample(m, n, seed)


class TestBuildLevel:
    def test_recovers_two_blocks(self):
        data = planted_two_blocks()
        lv = build_level(data.to_dense(), list(data.items), 1, HierarchyConfig(), np.random.default_rng(0))
        assert sorted(map(sorted, lv.clusters)) == [["b0_0", "b0_1", "b0_2"], ["b1_0", "b1_1", "b1_2"]]
        assert lv.completed.shape == (data.rows, 2)
        assert set(np.unique(lv.completed)) <= {0, 1}

    def test_two_variables(self, rng):
        X = (rng.random((50, 2)) < 0.5).astype(np.int8)
        lv = build_level(X, ["a", "b"], 1, HierarchyConfig(), np.random.default_rng(0))
        assert lv.clusters == [["a", "b"]] and lv.latents == ["Z1_1"]


class TestBuildHierarchy:
    def test_planted_nine_items(self):
        m = synthetic.planted_hierarchy(n_blocks=3, block_size=3)
        data = ltm.sample(m, 10_000, 0)
        model = build_hierarchy(data, HierarchyConfig(max_cluster_size=3, top_level_max=1))
        assert len(model.latents_at(1)) == 3 and len(model.latents_at(2)) == 1
        rows = hierarchy_report(model)
        for z in model.latents_at(1):
            assert all(p1 - p0 > 0.6 for lat, _, _, p1, p0 in rows if lat == z.id)

    def test_two_items(self, rng):
        data = InteractionMatrix.from_dense(rng.random((40, 2)) < 0.5, items=("a", "b"))
        model = build_hierarchy(data)
        assert len(model.latents) == 1 and model.max_level == 1

    def test_structure_invariants(self, rng):
        data = InteractionMatrix.from_dense(rng.random((300, 23)) < 0.2, items=tuple(f"i{k:02d}" for k in range(23)))
        model = build_hierarchy(data, HierarchyConfig(max_cluster_size=3, top_level_max=2))
        assert len(model.edges) == len(model.variables) - 1
        assert sorted(model.items) == sorted(data.items)
        counts = [len(data.items)] + [len(model.latents_at(l)) for l in range(1, model.max_level + 1)]
        assert all(b < a for a, b in zip(counts, counts[1:]))
        assert counts[-1] <= 2
        top = model.max_level
        for z in model.latents:
            if z.level < top:
                assert len(model.neighbors(z.id)) >= 2

    def test_deterministic(self):
        data = planted_two_blocks(2000, seed=5)
        a, b = build_hierarchy(data, HierarchyConfig(seed=3)), build_hierarchy(data, HierarchyConfig(seed=3))
        assert ltm.to_dict(a) == ltm.to_dict(b)

    def test_needs_two_items(self):
        with pytest.raises(ValueError):
            build_hierarchy(InteractionMatrix.from_dense(np.ones((5, 1)), items=("a",)))

    def test_planted_adjusted_rand(self):
        m = synthetic.planted_hierarchy()
        data = ltm.sample(m, 10_000, 1)
        model = build_hierarchy(data, HierarchyConfig(seed=1))
        found = {it: z.id for z in model.latents_at(1) for it in model.children(z.id)}
        items = list(data.items)
        assert adjusted_rand_score(synthetic.block_labels(items), [found[it] for it in items]) >= 0.8

    def test_config_validation(self):
        with pytest.raises(ValueError):
            HierarchyConfig(max_cluster_size=1)
        with pytest.raises(ValueError):
            HierarchyConfig(top_level_max=0)
        with pytest.raises(ValueError):
            HierarchyConfig(min_growth_ratio=1.5)
