"""2-D embedding of states through a fuzzy k-nearest-neighbor graph.

The high-dimensional side is the usual smooth-kNN membership graph: for each node,
``w_ij = exp(-max(0, d_ij - rho_i) / sigma_i)`` over its ``k`` exact nearest neighbors,
with ``sigma_i`` solved by bisection and the directed weights joined by probabilistic
union. The low-dimensional similarity is ``v_ij = 1 / (1 + |z_i - z_j|^2)`` and the
layout minimizes the fuzzy-set cross-entropy with negative-sampling SGD.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numba
import numpy as np
import scipy.sparse
from scipy.spatial.distance import cdist

from .errors import ConfigError, DataError, ParseError

SMOOTH_K_TOLERANCE = 1e-5
MIN_K_DIST_SCALE = 1e-3
SIGMA_ITERATIONS = 64
V_CLAMP = 1e-12
GRAD_CLIP = 4.0
REPULSION_EPS = 1e-3
NEGATIVE_TRIES = 32

DEFAULT_K = 15
DEFAULT_MIN_DIST = 0.1  # recorded for provenance; the printed kernel has no curve fit
DEFAULT_EPOCHS = 200
DEFAULT_LEARNING_RATE = 1.0
DEFAULT_NEGATIVES = 5


@dataclass(frozen=True, eq=False)
class FuzzyGraph:
    """Symmetrized fuzzy kNN graph.

    ``knn_indices``/``knn_dists``/``raw_weights`` hold the ``k`` directed entries per
    node before symmetrization; ``edges`` (``i < j``) and ``weights`` hold the
    symmetric graph with zero weights dropped.
    """

    n: int
    k: int
    edges: np.ndarray
    weights: np.ndarray
    rho: np.ndarray | None = None
    sigma: np.ndarray | None = None
    knn_indices: np.ndarray | None = None
    knn_dists: np.ndarray | None = None
    raw_weights: np.ndarray | None = None

    @classmethod
    def from_edges(cls, n, edges, weights, k=None):
        """Graph from an explicit undirected edge list (useful for tests and toys)."""
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        lo, hi = np.minimum(edges[:, 0], edges[:, 1]), np.maximum(edges[:, 0], edges[:, 1])
        if np.any(lo == hi):
            raise ConfigError("self-loops are not allowed")
        if np.any((weights <= 0) | (weights > 1)):
            raise ConfigError("edge weights must lie in (0, 1]")
        order = np.lexsort((hi, lo))
        return cls(int(n), int(k if k is not None else 0), np.stack([lo, hi], 1)[order], weights[order])

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    def matrix(self) -> scipy.sparse.csr_matrix:
        """Symmetric sparse weight matrix."""
        i, j = self.edges[:, 0], self.edges[:, 1]
        m = scipy.sparse.coo_matrix(
            (np.concatenate([self.weights, self.weights]), (np.concatenate([i, j]), np.concatenate([j, i]))),
            shape=(self.n, self.n),
        ).tocsr()
        m.sort_indices()
        return m


@dataclass(frozen=True, eq=False)
class EmbeddedStates:
    coords: np.ndarray
    graph: FuzzyGraph
    loss_trace: np.ndarray
    seed: int
    initial_loss: float


def exact_knn(points, k, chunk=512):
    """Exact Euclidean kNN excluding self; ties ordered by neighbor index."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    indices = np.empty((n, k), dtype=np.int64)
    dists = np.empty((n, k), dtype=np.float64)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        d = cdist(points[start:stop], points)
        rows = np.arange(stop - start)
        d[rows, rows + start] = np.inf
        kth = np.partition(d, k - 1, axis=1)[:, k - 1]
        for r in rows:
            cand = np.flatnonzero(d[r] <= kth[r])
            cand = cand[np.lexsort((cand, d[r, cand]))][:k]
            indices[start + r] = cand
            dists[start + r] = d[r, cand]
    return indices, dists


def smooth_knn_dist(knn_dists, k, n_iter=SIGMA_ITERATIONS):
    """Per-node ``rho`` and ``sigma`` such that sum_j exp(-max(0, d_ij - rho)/sigma) = log2(k).

    ``rho`` is the smallest nonzero neighbor distance (0 if every neighbor is a
    duplicate). ``sigma`` never drops below ``1e-3`` times the mean neighbor distance,
    and takes exactly that floor when the target is unreachable.
    """
    d = np.asarray(knn_dists, dtype=np.float64)
    n = d.shape[0]
    target = np.log2(k)
    masked = np.where(d > 0, d, np.inf)
    rho = masked.min(axis=1)
    rho[~np.isfinite(rho)] = 0.0
    excess = np.maximum(d - rho[:, None], 0.0)

    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    mid = np.ones(n)
    active = np.ones(n, dtype=bool)
    for _ in range(n_iter):
        if not active.any():
            break
        psum = np.exp(-excess[active] / mid[active, None]).sum(axis=1)
        idx = np.flatnonzero(active)
        done = np.abs(psum - target) < SMOOTH_K_TOLERANCE
        above = psum > target
        up = idx[above & ~done]
        down = idx[~above & ~done]
        hi[up] = mid[up]
        mid[up] = (lo[up] + hi[up]) / 2.0
        lo[down] = mid[down]
        unbounded = np.isinf(hi[down])
        mid[down] = np.where(unbounded, mid[down] * 2.0, (lo[down] + hi[down]) / 2.0)
        active[idx[done]] = False

    sigma = mid
    mean_all = d.mean()
    floor = np.where(rho > 0, MIN_K_DIST_SCALE * d.mean(axis=1), MIN_K_DIST_SCALE * mean_all)
    # neighbors at or inside rho contribute exactly 1 each; once they reach the
    # target no positive sigma solves the equation, so take the floor outright
    infeasible = (excess == 0).sum(axis=1) >= target
    sigma = np.where(infeasible, floor, np.maximum(sigma, floor))
    # all-zero neighbor distances: every weight is 1 whatever sigma is
    sigma[sigma == 0] = 1.0
    return rho, sigma


def build_fuzzy_graph(data, k: int = DEFAULT_K) -> FuzzyGraph:
    """Build the symmetrized fuzzy kNN graph of a dataset's states (or a raw array)."""
    points = data.states if hasattr(data, "states") else np.asarray(data, dtype=np.float64)
    if points.ndim != 2:
        raise DataError("points must be a 2-D array")
    n = points.shape[0]
    if k < 2:
        raise ConfigError("k must be >= 2")
    if n <= k:
        raise ConfigError(f"need more than k={k} states, got {n}")
    if not np.isfinite(points).all():
        raise DataError("non-finite state values")

    knn_i, knn_d = exact_knn(points, k)
    rho, sigma = smooth_knn_dist(knn_d, k)
    raw = np.exp(-np.maximum(knn_d - rho[:, None], 0.0) / sigma[:, None])

    rows = np.repeat(np.arange(n), k)
    p = scipy.sparse.coo_matrix((raw.ravel(), (rows, knn_i.ravel())), shape=(n, n)).tocsr()
    pt = p.T.tocsr()
    w = (p + pt - p.multiply(pt)).tocsr()
    upper = scipy.sparse.triu(w, k=1).tocoo()
    keep = upper.data > 0
    i, j, vals = upper.row[keep], upper.col[keep], upper.data[keep]
    order = np.lexsort((j, i))
    edges = np.stack([i[order], j[order]], axis=1).astype(np.int64)
    return FuzzyGraph(
        n=n, k=k, edges=edges, weights=vals[order].astype(np.float64),
        rho=rho, sigma=sigma, knn_indices=knn_i, knn_dists=knn_d, raw_weights=raw,
    )


def low_dim_similarity(coords, edges):
    diff = coords[edges[:, 0]] - coords[edges[:, 1]]
    return 1.0 / (1.0 + np.einsum("ij,ij->i", diff, diff))


def embedding_loss(graph: FuzzyGraph, coords) -> float:
    """Fuzzy-set cross-entropy between graph weights and embedding similarities over the edge set."""
    coords = np.asarray(coords, dtype=np.float64)
    if not np.isfinite(coords).all():
        raise DataError("coords must be finite")
    w = graph.weights
    v = np.clip(low_dim_similarity(coords, graph.edges), V_CLAMP, 1.0 - V_CLAMP)
    attract = np.zeros_like(w)
    pos = w > 0
    attract[pos] = w[pos] * np.log(w[pos] / v[pos])
    repel = np.zeros_like(w)
    part = w < 1
    repel[part] = (1.0 - w[part]) * np.log((1.0 - w[part]) / (1.0 - v[part]))
    return float(np.sum(attract + repel))


@numba.njit(cache=True)
def _is_neighbor(indptr, indices, i, c):
    lo = indptr[i]
    hi = indptr[i + 1]
    while lo < hi:
        mid = (lo + hi) // 2
        val = indices[mid]
        if val == c:
            return True
        if val < c:
            lo = mid + 1
        else:
            hi = mid
    return False


@numba.njit(cache=True)
def _clip(g):
    if g > GRAD_CLIP:
        return GRAD_CLIP
    if g < -GRAD_CLIP:
        return -GRAD_CLIP
    return g


@numba.njit(cache=True)
def _sgd_epoch(coords, heads, tails, weights, probs, indptr, indices, n_negative, alpha, seed):
    np.random.seed(seed)
    n = coords.shape[0]
    for e in range(heads.shape[0]):
        if np.random.random() >= probs[e]:
            continue
        i = heads[e]
        j = tails[e]
        dx = coords[i, 0] - coords[j, 0]
        dy = coords[i, 1] - coords[j, 1]
        d2 = dx * dx + dy * dy
        coeff = -2.0 / (1.0 + d2)
        gx = _clip(coeff * dx)
        gy = _clip(coeff * dy)
        w = weights[e]
        if w < 1.0 and d2 > 0.0:
            # the edge's own (1 - w) term keeps partial neighbors from collapsing
            rep = (1.0 - w) * 2.0 / ((REPULSION_EPS + d2) * (1.0 + d2))
            gx += _clip(rep * dx)
            gy += _clip(rep * dy)
        coords[i, 0] += alpha * gx
        coords[i, 1] += alpha * gy
        coords[j, 0] -= alpha * gx
        coords[j, 1] -= alpha * gy

        for _ in range(n_negative):
            m = -1
            for _t in range(NEGATIVE_TRIES):
                c = np.random.randint(0, n)
                if c != i and not _is_neighbor(indptr, indices, i, c):
                    m = c
                    break
            if m < 0:
                continue
            dx = coords[i, 0] - coords[m, 0]
            dy = coords[i, 1] - coords[m, 1]
            d2 = dx * dx + dy * dy
            if d2 <= 0.0:
                continue
            coeff = 2.0 / ((REPULSION_EPS + d2) * (1.0 + d2))
            coords[i, 0] += alpha * _clip(coeff * dx)
            coords[i, 1] += alpha * _clip(coeff * dy)


def optimize_embedding(
    graph: FuzzyGraph,
    epochs: int = DEFAULT_EPOCHS,
    learning_rate: float = DEFAULT_LEARNING_RATE,
    negatives_per_edge: int = DEFAULT_NEGATIVES,
    seed: int = 0,
) -> EmbeddedStates:
    """Negative-sampling SGD on the cross-entropy layout objective.

    Every epoch each directed edge is sampled with probability ``w / max(w)``; a
    sampled edge pulls both endpoints together, with a ``(1 - w)``-weighted
    repulsion from its own second summand, and pushes its head away from
    ``negatives_per_edge`` uniformly drawn non-neighbors. The step size decays
    linearly to 0. Sequential and deterministic for a given seed.
    """
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    if learning_rate <= 0:
        raise ConfigError("learning_rate must be positive")
    if negatives_per_edge < 0:
        raise ConfigError("negatives_per_edge must be >= 0")
    rng = np.random.default_rng(seed)
    coords = rng.uniform(-10.0, 10.0, size=(graph.n, 2))
    epoch_seeds = rng.integers(0, 2**31 - 1, size=epochs)
    initial = embedding_loss(graph, coords)

    csr = graph.matrix()
    indptr = csr.indptr.astype(np.int64)
    indices = csr.indices.astype(np.int64)
    heads = np.repeat(np.arange(graph.n, dtype=np.int64), np.diff(indptr))
    tails = indices
    w = csr.data.astype(np.float64)
    probs = w / w.max() if w.size else w

    trace = np.empty(epochs)
    for epoch in range(epochs):
        alpha = learning_rate * (1.0 - epoch / epochs)
        _sgd_epoch(coords, heads, tails, w, probs, indptr, indices, int(negatives_per_edge), alpha, int(epoch_seeds[epoch]))
        trace[epoch] = embedding_loss(graph, coords)
    if not np.isfinite(coords).all():  # pragma: no cover - clipping bounds every step
        raise DataError("embedding diverged")
    return EmbeddedStates(coords=coords, graph=graph, loss_trace=trace, seed=int(seed), initial_loss=initial)


def embed(data, k=DEFAULT_K, epochs=DEFAULT_EPOCHS, learning_rate=DEFAULT_LEARNING_RATE,
          negatives_per_edge=DEFAULT_NEGATIVES, seed=0) -> EmbeddedStates:
    return optimize_embedding(build_fuzzy_graph(data, k), epochs, learning_rate, negatives_per_edge, seed)


# -- file formats -------------------------------------------------------------


def write_embedding(embedding: EmbeddedStates, dataset, path) -> None:
    coords = embedding.coords
    if coords.shape[0] != dataset.n_states:
        raise DataError("embedding and dataset sizes differ")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "step", "z0", "z1"])
        for e, s, (a, b) in zip(dataset.episode_index, dataset.step_index, coords):
            w.writerow([int(e), int(s), repr(float(a)), repr(float(b))])


def read_embedding(path):
    """Return ``(episode, step, coords)`` arrays from an embedding CSV."""
    eps, steps, coords = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["episode", "step", "z0", "z1"]:
            raise ParseError("embedding header must be 'episode,step,z0,z1'", 1)
        for row in reader:
            if not row:
                continue
            if len(row) != 4:
                raise ParseError("expected 4 fields", reader.line_num)
            try:
                eps.append(int(row[0]))
                steps.append(int(row[1]))
                coords.append((float(row[2]), float(row[3])))
            except ValueError:
                raise ParseError("malformed value", reader.line_num) from None
    return np.asarray(eps, dtype=np.int64), np.asarray(steps, dtype=np.int64), np.asarray(coords, dtype=np.float64).reshape(-1, 2)


def write_loss_trace(embedding: EmbeddedStates, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        w.writerow([0, repr(float(embedding.initial_loss))])
        for epoch, loss in enumerate(embedding.loss_trace, start=1):
            w.writerow([epoch, repr(float(loss))])
