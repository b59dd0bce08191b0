"""Ward agglomerative clustering of the 2-D embedding and dendrogram cuts."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numba
import numpy as np

from .errors import AlignmentError, ConfigError, DataError, ParseError


@dataclass(frozen=True, eq=False)
class PhaseAssignment:
    """Integer phase label per state, in dataset row order."""

    labels: np.ndarray
    K: int

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.int64, copy=True).reshape(-1)
        K = int(self.K)
        if K < 1:
            raise ConfigError("K must be >= 1")
        if labels.size and (labels.min() < 0 or labels.max() >= K):
            raise DataError("label out of range")
        if np.bincount(labels, minlength=K).min() == 0:
            raise DataError("every phase must own at least one state")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "K", K)

    def __len__(self):
        return self.labels.size

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.K)


@dataclass(frozen=True, eq=False)
class Dendrogram:
    """Merge history of ``n - 1`` Ward merges.

    ``pairs[s]`` holds the two merged cluster ids (leaves are ``0..n-1``, the
    cluster created by merge ``s`` is ``n + s``), ``costs[s]`` the Ward increase in
    within-cluster sum of squares and ``sizes[s]`` the merged size.
    """

    n: int
    pairs: np.ndarray
    costs: np.ndarray
    sizes: np.ndarray

    @property
    def merges(self):
        return [
            (int(a), int(b), float(c), int(s))
            for (a, b), c, s in zip(self.pairs, self.costs, self.sizes)
        ]


@numba.njit(cache=True, inline="always")
def _cidx(n, i, j):
    # condensed index for i < j
    return n * i - (i * (i + 1)) // 2 + (j - i - 1)


@numba.njit(cache=True)
def _rescan(D, n, active, i, nn, nnd):
    best = np.inf
    arg = -1
    for m in range(i + 1, n):
        if active[m]:
            d = D[_cidx(n, i, m)]
            if d < best:
                best = d
                arg = m
    nn[i] = arg
    nnd[i] = best


@numba.njit(cache=True)
def _ward_kernel(X):
    n = X.shape[0]
    dim = X.shape[1]
    D = np.empty(n * (n - 1) // 2)
    for i in range(n):
        for j in range(i + 1, n):
            s = 0.0
            for c in range(dim):
                t = X[i, c] - X[j, c]
                s += t * t
            D[_cidx(n, i, j)] = 0.5 * s

    active = np.ones(n, dtype=np.bool_)
    size = np.ones(n)
    ids = np.arange(n)
    nn = np.full(n, -1, dtype=np.int64)
    nnd = np.full(n, np.inf)
    for i in range(n - 1):
        _rescan(D, n, active, i, nn, nnd)

    pairs = np.empty((n - 1, 2), dtype=np.int64)
    costs = np.empty(n - 1)
    sizes = np.empty(n - 1, dtype=np.int64)
    for step in range(n - 1):
        best = np.inf
        i = -1
        for a in range(n):
            if active[a] and nnd[a] < best:
                best = nnd[a]
                i = a
        j = nn[i]
        ni = size[i]
        nj = size[j]
        a_id = ids[i]
        b_id = ids[j]
        if a_id > b_id:
            a_id, b_id = b_id, a_id
        pairs[step, 0] = a_id
        pairs[step, 1] = b_id
        costs[step] = best
        sizes[step] = np.int64(ni + nj)

        # Lance-Williams update for the Ward increment
        for k in range(n):
            if not active[k] or k == i or k == j:
                continue
            nk = size[k]
            ki = _cidx(n, k, i) if k < i else _cidx(n, i, k)
            kj = _cidx(n, k, j) if k < j else _cidx(n, j, k)
            D[ki] = ((ni + nk) * D[ki] + (nj + nk) * D[kj] - nk * best) / (ni + nj + nk)

        active[j] = False
        nn[j] = -1
        nnd[j] = np.inf
        size[i] = ni + nj
        ids[i] = n + step

        _rescan(D, n, active, i, nn, nnd)
        for k in range(j):
            if not active[k] or k == i:
                continue
            if k < i:
                if nn[k] == i or nn[k] == j:
                    _rescan(D, n, active, k, nn, nnd)
                else:
                    d = D[_cidx(n, k, i)]
                    if d < nnd[k] or (d == nnd[k] and i < nn[k]):
                        nn[k] = i
                        nnd[k] = d
            elif nn[k] == j:
                _rescan(D, n, active, k, nn, nnd)
    return pairs, costs, sizes


def build_dendrogram(embedding) -> Dendrogram:
    """Ward agglomeration of the embedding coordinates (or any point array).

    Each step merges the pair with the smallest ``|A||B|/(|A|+|B|) * |c_A - c_B|^2``;
    ties go to the pair whose smallest leaf indices are lexicographically smallest.
    """
    coords = embedding.coords if hasattr(embedding, "coords") else embedding
    X = np.ascontiguousarray(coords, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DataError("need at least 2 points")
    if not np.isfinite(X).all():
        raise DataError("non-finite coordinates")
    pairs, costs, sizes = _ward_kernel(X)
    return Dendrogram(X.shape[0], pairs, costs, sizes)


def first_appearance_labels(roots: np.ndarray) -> np.ndarray:
    """Relabel arbitrary cluster keys 0..K-1 by order of first appearance."""
    _, first, inverse = np.unique(roots, return_index=True, return_inverse=True)
    rank = np.empty(first.size, dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(first.size)
    return rank[inverse]


def cut_dendrogram(dendrogram: Dendrogram, K: int) -> PhaseAssignment:
    """Partition after the first ``n - K`` merges, labels ordered by first appearance."""
    n = dendrogram.n
    if not 1 <= K <= n:
        raise ConfigError(f"K must lie in [1, {n}], got {K}")
    parent = np.arange(2 * n - 1)
    for s in range(n - K):
        a, b = dendrogram.pairs[s]
        parent[a] = n + s
        parent[b] = n + s
    # resolve roots: merge s only points forward, so a reverse pass settles every node
    for node in range(n + (n - K) - 1, -1, -1):
        p = parent[node]
        if p != node:
            parent[node] = parent[p]
    return PhaseAssignment(first_appearance_labels(parent[:n]), K)


# -- file formats -------------------------------------------------------------


def write_assignment(assignment: PhaseAssignment, dataset, path) -> None:
    if len(assignment) != dataset.n_states:
        raise AlignmentError("assignment and dataset sizes differ")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "step", "phase"])
        for e, s, lab in zip(dataset.episode_index, dataset.step_index, assignment.labels):
            w.writerow([int(e), int(s), int(lab)])


def read_assignment(path, dataset=None, K=None) -> PhaseAssignment:
    eps, steps, labels = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["episode", "step", "phase"]:
            raise ParseError("assignment header must be 'episode,step,phase'", 1)
        for row in reader:
            if not row:
                continue
            if len(row) != 3:
                raise ParseError("expected 3 fields", reader.line_num)
            try:
                eps.append(int(row[0]))
                steps.append(int(row[1]))
                labels.append(int(row[2]))
            except ValueError:
                raise ParseError("non-integer field", reader.line_num) from None
    if dataset is not None:
        check_alignment(dataset, np.asarray(eps), np.asarray(steps))
    labels = np.asarray(labels, dtype=np.int64)
    return PhaseAssignment(labels, K if K is not None else int(labels.max()) + 1)


def check_alignment(dataset, episodes, steps) -> None:
    if len(episodes) != dataset.n_states or not (
        np.array_equal(episodes, dataset.episode_index) and np.array_equal(steps, dataset.step_index)
    ):
        raise AlignmentError("rows are not aligned with the dataset's (episode, step) order")
