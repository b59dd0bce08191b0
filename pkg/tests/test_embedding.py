from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from policy_phases.dataset import SyntheticConfig, generate_synthetic
from policy_phases.embedding import (
    MIN_K_DIST_SCALE,
    FuzzyGraph,
    build_fuzzy_graph,
    embedding_loss,
    exact_knn,
    optimize_embedding,
    read_embedding,
    smooth_knn_dist,
    write_embedding,
    write_loss_trace,
)
from policy_phases.errors import ConfigError, DataError


def dense_loss(n, edges, weights, coords):
    """Direct evaluation of the edge-set cross-entropy from a dense weight matrix."""
    W = np.zeros((n, n))
    for (i, j), w in zip(edges, weights):
        W[i, j] = W[j, i] = w
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            w = W[i, j]
            if w == 0:
                continue
            d2 = sum((coords[i][c] - coords[j][c]) ** 2 for c in range(2))
            v = min(max(1.0 / (1.0 + d2), 1e-12), 1 - 1e-12)
            term = w * math.log(w / v)
            if w < 1:
                term += (1 - w) * math.log((1 - w) / (1 - v))
            total += term
    return total


@st.composite
def small_graphs(draw):
    n = draw(st.integers(2, 20))
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    chosen = draw(st.lists(st.sampled_from(pairs), min_size=1, max_size=len(pairs), unique=True))
    weights = draw(
        st.lists(
            st.one_of(st.just(1.0), st.floats(1e-6, 1.0, exclude_min=False)),
            min_size=len(chosen), max_size=len(chosen),
        )
    )
    coords = draw(
        st.lists(st.tuples(st.floats(-20, 20), st.floats(-20, 20)), min_size=n, max_size=n)
    )
    return n, chosen, weights, np.asarray(coords)


class TestLoss:
    def test_single_edge_log2(self):
        g = FuzzyGraph.from_edges(2, [(0, 1)], [1.0])
        assert embedding_loss(g, [[0.0, 0.0], [1.0, 0.0]]) == pytest.approx(math.log(2), abs=1e-15)

    def test_matched_half(self):
        g = FuzzyGraph.from_edges(2, [(0, 1)], [0.5])
        assert embedding_loss(g, [[0.0, 0.0], [0.0, 1.0]]) == pytest.approx(0.0, abs=1e-15)

    def test_zero_when_v_equals_w(self):
        rng = np.random.default_rng(0)
        coords = rng.normal(size=(6, 2))
        edges = [(i, j) for i in range(6) for j in range(i + 1, 6)]
        w = [1.0 / (1.0 + np.sum((coords[i] - coords[j]) ** 2)) for i, j in edges]
        g = FuzzyGraph.from_edges(6, edges, w)
        assert embedding_loss(g, coords) == pytest.approx(0.0, abs=1e-12)

    def test_coincident_points_clamped(self):
        g = FuzzyGraph.from_edges(2, [(0, 1)], [0.5])
        val = embedding_loss(g, np.zeros((2, 2)))
        assert np.isfinite(val) and val > 0

    def test_nonfinite_coords(self):
        g = FuzzyGraph.from_edges(2, [(0, 1)], [0.5])
        with pytest.raises(DataError):
            embedding_loss(g, [[0, np.nan], [0, 0]])

    @settings(max_examples=150, deadline=None)
    @given(small_graphs())
    def test_matches_dense_oracle(self, case):
        n, edges, weights, coords = case
        g = FuzzyGraph.from_edges(n, edges, weights)
        assert abs(embedding_loss(g, coords) - dense_loss(n, edges, weights, coords)) <= 1e-9

    @settings(max_examples=100, deadline=None)
    @given(small_graphs(), st.floats(0, 2 * math.pi), st.floats(-50, 50), st.floats(-50, 50), st.booleans())
    def test_rigid_invariance(self, case, theta, tx, ty, reflect):
        n, edges, weights, coords = case
        g = FuzzyGraph.from_edges(n, edges, weights)
        R = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        if reflect:
            R = R @ np.diag([1.0, -1.0])
        moved = coords @ R.T + np.array([tx, ty])
        assert abs(embedding_loss(g, moved) - embedding_loss(g, coords)) <= 1e-9


class TestGraph:
    def test_collinear_sigma_clamps(self):
        pts = np.array([[0.0], [1.0], [2.0]])
        g = build_fuzzy_graph(pts, k=2)
        assert g.rho[0] == 1.0
        assert g.sigma[0] == pytest.approx(MIN_K_DIST_SCALE * 1.5)
        # raw weight to the far point is effectively zero
        far = list(g.knn_indices[0]).index(2)
        assert g.raw_weights[0, far] < 1e-200

    def test_nearest_neighbor_raw_weight_is_one(self):
        rng = np.random.default_rng(3)
        g = build_fuzzy_graph(rng.normal(size=(200, 4)), k=10)
        assert np.all(g.raw_weights[:, 0] == 1.0)
        assert g.raw_weights.shape == (200, 10)
        assert np.all((g.weights > 0) & (g.weights <= 1))

    def test_sigma_bisection_target(self):
        rng = np.random.default_rng(4)
        k = 15
        g = build_fuzzy_graph(rng.normal(size=(300, 3)), k=k)
        sums = g.raw_weights.sum(axis=1)
        assert np.max(np.abs(sums - np.log2(k))) <= 1e-5

    def test_union_formula(self):
        # directed raw weights 1 (0->1) and 0.5 (1->0) give 1 + 0.5 - 0.5
        pts = np.array([[0.0], [1.0], [2.5], [10.0]])
        g = build_fuzzy_graph(pts, k=2)
        W = g.matrix().toarray()
        P = np.zeros((4, 4))
        for i in range(4):
            P[i, g.knn_indices[i]] = g.raw_weights[i]
        np.testing.assert_allclose(W, P + P.T - P * P.T, atol=0, rtol=1e-15)
        assert np.array_equal(W, W.T)

    def test_duplicates_do_not_break(self):
        pts = np.vstack([np.zeros((5, 2)), np.ones((5, 2))])
        g = build_fuzzy_graph(pts, k=3)
        assert np.all(np.isfinite(g.sigma)) and np.all(g.sigma > 0)

    def test_n_not_above_k(self):
        with pytest.raises(ConfigError):
            build_fuzzy_graph(np.zeros((15, 2)), k=15)
        with pytest.raises(ConfigError):
            build_fuzzy_graph(np.zeros((5, 2)), k=1)

    def test_knn_matches_bruteforce(self):
        rng = np.random.default_rng(5)
        X = rng.integers(0, 4, size=(60, 2)).astype(float)  # many ties
        idx, dist = exact_knn(X, 7, chunk=16)
        for i in range(60):
            d = np.linalg.norm(X - X[i], axis=1)
            d[i] = np.inf
            order = sorted(range(60), key=lambda j: (d[j], j))[:7]
            assert idx[i].tolist() == order
            np.testing.assert_array_equal(dist[i], d[order])

    def test_smooth_knn_dist_all_duplicates(self):
        rho, sigma = smooth_knn_dist(np.zeros((3, 4)), 4)
        np.testing.assert_array_equal(rho, 0.0)
        assert np.all(sigma >= 0)


class TestOptimize:
    def test_single_edge_attraction(self):
        g = FuzzyGraph.from_edges(2, [(0, 1)], [1.0])
        emb = optimize_embedding(g, epochs=400, learning_rate=0.1, seed=0)
        trace = np.concatenate([[emb.initial_loss], emb.loss_trace])
        steps = np.diff(trace)
        assert np.all(steps <= 0)
        assert np.all(steps[trace[:-1] > 1e-9] < 0)
        assert embedding_loss(g, emb.coords) < 1e-9  # v is ~1

    def test_deterministic(self):
        rng = np.random.default_rng(6)
        g = build_fuzzy_graph(rng.normal(size=(80, 3)), k=8)
        a = optimize_embedding(g, epochs=30, seed=11)
        b = optimize_embedding(g, epochs=30, seed=11)
        np.testing.assert_array_equal(a.coords, b.coords)
        np.testing.assert_array_equal(a.loss_trace, b.loss_trace)
        c = optimize_embedding(g, epochs=30, seed=12)
        assert not np.array_equal(a.coords, c.coords)

    def test_init_range(self):
        g = FuzzyGraph.from_edges(3, [(0, 1)], [1.0])
        emb = optimize_embedding(g, epochs=1, learning_rate=1e-12, seed=2)
        assert np.all(np.abs(emb.coords) <= 10.0 + 1e-6)

    @pytest.mark.parametrize("kwargs", [dict(epochs=0), dict(learning_rate=0.0), dict(negatives_per_edge=-1)])
    def test_bad_params(self, kwargs):
        g = FuzzyGraph.from_edges(2, [(0, 1)], [1.0])
        with pytest.raises(ConfigError):
            optimize_embedding(g, **kwargs)

    def test_phases_separate(self):
        ds, labels = generate_synthetic(SyntheticConfig(n_phases=4, episodes=1, steps=400, noise_sigma=0.02, seed=1))
        emb = optimize_embedding(build_fuzzy_graph(ds, 15), epochs=200, seed=1)
        assert emb.loss_trace[-1] < emb.initial_loss
        assert np.all(np.isfinite(emb.coords))
        lab = labels.labels
        D = np.linalg.norm(emb.coords[:, None] - emb.coords[None], axis=2)
        same = lab[:, None] == lab[None]
        off = ~np.eye(len(lab), dtype=bool)
        assert D[same & off].mean() < D[~same].mean()


def test_embedding_csv_roundtrip(tmp_path):
    ds, _ = generate_synthetic(SyntheticConfig(n_phases=3, episodes=2, steps=30, seed=2))
    emb = optimize_embedding(build_fuzzy_graph(ds, 5), epochs=5, seed=0)
    write_embedding(emb, ds, tmp_path / "e.csv")
    eps, steps, coords = read_embedding(tmp_path / "e.csv")
    np.testing.assert_array_equal(coords, emb.coords)
    np.testing.assert_array_equal(eps, ds.episode_index)
    np.testing.assert_array_equal(steps, ds.step_index)
    write_loss_trace(emb, tmp_path / "l.csv")
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss" and len(lines) == 1 + 1 + 5
    assert float(lines[1].split(",")[1]) == emb.initial_loss
