import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stainpool.errors import ConfigError, GraphError
from stainpool.saap import (
    prune_graph,
    retained_count,
    saap_pool,
    sag_scores,
    stain_pool_readout,
    stain_weights_and_scale,
    topk_select,
)
from stainpool.tensor import Tensor, finite_diff_check, sum_, tanh

from .conftest import cycle_graph, path_graph, random_graph


class TestScores:
    def test_zero_theta(self, rng):
        g = random_graph(rng, n=6)
        assert not sag_scores(rng.normal(size=(6, 3)), g, np.zeros((3, 1))).data.any()

    def test_single_node(self):
        s = sag_scores(np.array([[1.0]]), path_graph(1), np.array([[1.0]]))
        assert s.data[0, 0] == pytest.approx(math.tanh(1.0), abs=1e-15)

    def test_gradient(self, rng):
        g = random_graph(rng, n=7)
        x = Tensor(rng.normal(size=(7, 3)), requires_grad=True)
        th = Tensor(rng.normal(size=(3, 1)), requires_grad=True)
        assert finite_diff_check(lambda: sum_(sag_scores(x, g, th)), [x, th]) < 1e-4


class TestTopk:
    def test_order(self):
        assert topk_select([0.9, 0.1, 0.5, 0.3], 0.5).tolist() == [0, 2]

    def test_all(self):
        assert sorted(topk_select([0.2, 0.1, 0.3], 1.0).tolist()) == [0, 1, 2]

    def test_ties(self):
        assert topk_select([0.4, 0.4, 0.4], 0.5).tolist() == [0, 1]

    @pytest.mark.parametrize("ratio", [0.0, -0.1, 1.5])
    def test_bad_ratio(self, ratio):
        with pytest.raises(ConfigError):
            topk_select([1.0], ratio)

    @given(n=st.integers(1, 300), ratio=st.floats(0.01, 1.0))
    def test_count(self, n, ratio):
        a = np.random.default_rng(n).random(n)
        keep = topk_select(a, ratio)
        assert len(keep) == math.ceil(round(ratio * n, 9))
        dropped = np.setdiff1d(np.arange(n), keep)
        if dropped.size:
            assert a[keep].min() >= a[dropped].max()

    def test_schedule(self):
        n, seen = 100, []
        for _ in range(4):
            n = retained_count(n, 0.7)
            seen.append(n)
        assert seen == [70, 49, 35, 25]

    @given(seed=st.integers(0, 2**31), bump=st.floats(0.0, 2.0))
    def test_monotone(self, seed, bump):
        a = np.random.default_rng(seed).random(20)
        keep = set(topk_select(a, 0.5).tolist())
        for i in keep:
            b = a.copy()
            b[i] += bump
            assert i in set(topk_select(b, 0.5).tolist())


class TestPrune:
    def test_path_drop_middle(self):
        assert prune_graph(path_graph(3), np.array([0, 2])).num_edges == 0

    def test_keep_all(self, rng):
        g = random_graph(rng, n=8)
        sub = prune_graph(g, np.arange(8))
        assert np.array_equal(sub.edges, g.edges) and np.array_equal(sub.node_ids, g.node_ids)

    def test_triangle(self):
        sub = prune_graph(cycle_graph(3, 3), np.array([0, 1]))
        assert sub.edges.tolist() == [[0, 1]]


class TestStainWeights:
    def test_two_equal(self):
        a, _, alpha = stain_weights_and_scale(np.zeros(2), np.ones((2, 3)), np.array(["A", "B"]))
        np.testing.assert_allclose(a.data.ravel(), [0.5, 0.5])
        np.testing.assert_allclose(alpha.data.ravel(), [0.5, 0.5])

    def test_three_equal(self):
        _, _, alpha = stain_weights_and_scale(np.zeros(3), np.ones((3, 2)), np.array(["A", "A", "B"]))
        np.testing.assert_allclose(alpha.data.ravel(), [2 / 3, 1 / 3], atol=1e-15)

    def test_singleton(self, rng):
        x = rng.normal(size=(1, 4))
        a, xs, alpha = stain_weights_and_scale(np.array([0.3]), x, np.array(["A"]))
        assert a.data.ravel().tolist() == [1.0] and alpha.data.ravel().tolist() == [1.0]
        np.testing.assert_array_equal(xs.data, x)

    def test_features_scaled_by_softmax(self, rng):
        s = rng.normal(size=4)
        x = rng.normal(size=(4, 3))
        a, xs, _ = stain_weights_and_scale(s, x, np.array(list("ABAB")))
        expected = np.exp(s) / np.exp(s).sum()
        np.testing.assert_allclose(a.data.ravel(), expected, atol=1e-15)
        np.testing.assert_allclose(xs.data, expected[:, None] * x, atol=1e-15)

    def test_empty(self):
        with pytest.raises(GraphError):
            stain_weights_and_scale(np.zeros(0), np.zeros((0, 2)), np.array([], dtype=str))

    @given(seed=st.integers(0, 2**31), n=st.integers(1, 40))
    def test_alpha_sums_to_one(self, seed, n):
        rng = np.random.default_rng(seed)
        st_ = rng.choice(["A", "B", "C"], size=n)
        _, _, alpha = stain_weights_and_scale(rng.uniform(-1, 1, n), rng.normal(size=(n, 2)), st_)
        assert abs(alpha.data.sum() - 1.0) <= 1e-9
        assert (alpha.data >= 0).all()


class TestReadout:
    def test_worked_example(self):
        r = stain_pool_readout(np.array([[1.0, 3.0], [2.0, 0.0]]), np.array([0.5, 0.5]), np.array(["A", "B"]))
        assert r.data.tolist() == [0.75, 0.75, 1.0, 1.5]

    def test_single_node(self):
        r = stain_pool_readout(np.array([[2.0, -1.0]]), np.array([1.0]), np.array(["A"]))
        assert r.data.tolist() == [2.0, -1.0, 2.0, -1.0]

    def test_zero(self):
        r = stain_pool_readout(np.zeros((3, 2)), np.array([0.5, 0.5]), np.array(["A", "B", "A"]))
        assert not r.data.any()

    @given(seed=st.integers(0, 2**31), stains=st.integers(1, 4), n=st.integers(1, 30))
    def test_length_two_f(self, seed, stains, n):
        rng = np.random.default_rng(seed)
        labels = np.array([f"S{i % stains}" for i in range(n)])
        k = len(set(labels.tolist()))
        r = stain_pool_readout(rng.normal(size=(n, 5)), np.full(k, 1.0 / k), labels)
        assert r.data.shape == (10,)


class TestPool:
    def test_pruned_edges_lose_an_endpoint(self, rng):
        g = random_graph(rng, n=20)
        res = saap_pool(rng.normal(size=(20, 4)), g, rng.normal(size=(4, 1)), 0.5)
        kept = set(res.retained.tolist())
        assert len(kept) == 10
        surviving = {tuple(sorted(map(int, res.pruned_graph.node_ids[e]))) for e in res.pruned_graph.edges}
        for u, v in g.edges:
            pair = tuple(sorted((int(u), int(v))))
            if pair not in surviving:
                assert u not in kept or v not in kept
            else:
                assert u in kept and v in kept

    def test_end_to_end_gradient(self, rng):
        g = random_graph(rng, n=9)
        x = Tensor(rng.normal(size=(9, 3)), requires_grad=True)
        th = Tensor(rng.normal(size=(3, 1)), requires_grad=True)
        scores = sag_scores(x.data, g, th.data).data.ravel()
        gap = np.sort(scores)[::-1]
        k = retained_count(9, 0.7)
        assert gap[k - 1] - gap[k] > 1e-4  # retained set is locally stable
        f = lambda: sum_(tanh(saap_pool(x, g, th, 0.7).readout))  # noqa: E731
        assert finite_diff_check(f, [x, th]) < 1e-4

    def test_relative_scaling_multiplies_by_count(self, rng):
        g = random_graph(rng, n=10)
        x, th = rng.normal(size=(10, 3)), rng.normal(size=(3, 1))
        lit = saap_pool(x, g, th, 0.7)
        rel = saap_pool(x, g, th, 0.7, relative=True)
        np.testing.assert_allclose(rel.scaled_features.data, 7 * lit.scaled_features.data, atol=1e-14)
        assert rel.stain_weights == lit.stain_weights
