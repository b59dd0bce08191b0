"""Phase transition statistics, conditional entropy and the phase transition graph."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .clustering import build_dendrogram, cut_dendrogram
from .errors import AlignmentError, ConfigError, ParseError

DEFAULT_THRESHOLD = 0.7
DEFAULT_K_MIN = 2
DEFAULT_K_MAX = 20


class EmptyRowWarning(UserWarning):
    """A phase has no outgoing transition; its entropy is taken as 0."""


@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    """Successor counts ``counts[i, j]`` and occupancy ``occupancy[i]`` of each phase.

    ``probs`` divides each row by its own transition total so that rows with at
    least one transition are exactly stochastic; rows without transitions are zero.
    """

    K: int
    counts: np.ndarray
    occupancy: np.ndarray

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.int64, copy=True)
        occ = np.array(self.occupancy, dtype=np.int64, copy=True).reshape(-1)
        K = int(self.K)
        if counts.shape != (K, K) or occ.shape != (K,):
            raise ConfigError("counts must be KxK and occupancy length K")
        if (counts < 0).any() or (occ < 0).any():
            raise ConfigError("counts must be nonnegative")
        if (counts.sum(axis=1) > occ).any():
            raise ConfigError("a row has more transitions than its occupancy")
        counts.setflags(write=False)
        occ.setflags(write=False)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "occupancy", occ)

    @classmethod
    def from_counts(cls, counts, occupancy=None) -> "TransitionMatrix":
        counts = np.asarray(counts, dtype=np.int64)
        if occupancy is None:
            occupancy = counts.sum(axis=1)
        return cls(counts.shape[0], counts, occupancy)

    @property
    def row_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def probs(self) -> np.ndarray:
        tot = self.row_totals
        out = np.zeros((self.K, self.K))
        nz = tot > 0
        out[nz] = self.counts[nz] / tot[nz, None]
        return out

    @property
    def empty_rows(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.row_totals == 0)]

    @property
    def n_transitions(self) -> int:
        return int(self.counts.sum())


def transition_counts(assignment, dataset) -> TransitionMatrix:
    """Count phase successions inside episodes; episode boundaries are never crossed."""
    labels = assignment.labels
    if labels.size != dataset.n_states:
        raise AlignmentError(f"{labels.size} labels for {dataset.n_states} states")
    K = assignment.K
    ends = dataset.episode_offsets[1:] - 1
    has_next = np.ones(labels.size, dtype=bool)
    has_next[ends] = False
    src = labels[:-1][has_next[:-1]]
    dst = labels[1:][has_next[:-1]]
    counts = np.bincount(src * K + dst, minlength=K * K).reshape(K, K)
    return TransitionMatrix(K, counts, np.bincount(labels, minlength=K))


def _entropy(p) -> float:
    p = p[p > 0]
    # 0.0 - x keeps a deterministic row at +0.0 rather than -0.0
    return 0.0 - float(np.sum(p * np.log(p)))


def cluster_entropy(matrix: TransitionMatrix, i: int) -> float:
    """Natural-log entropy of phase ``i``'s successor distribution."""
    if not 0 <= i < matrix.K:
        raise ConfigError(f"phase {i} out of range")
    if matrix.row_totals[i] == 0:
        warnings.warn(f"phase {i} has no outgoing transitions; entropy set to 0", EmptyRowWarning, stacklevel=2)
        return 0.0
    return _entropy(matrix.probs[i])


def row_entropies(matrix: TransitionMatrix) -> np.ndarray:
    probs = matrix.probs
    out = np.zeros(matrix.K)
    for i in range(matrix.K):
        if matrix.row_totals[i] > 0:
            out[i] = _entropy(probs[i])
    if matrix.empty_rows:
        warnings.warn(
            f"phases {matrix.empty_rows} have no outgoing transitions; entropy set to 0",
            EmptyRowWarning,
            stacklevel=2,
        )
    return out


def conditional_entropy(matrix: TransitionMatrix) -> float:
    """Occupancy-weighted mean of the per-phase successor entropies."""
    if matrix.n_transitions < 1:
        raise ConfigError("matrix has no transitions")
    weights = matrix.occupancy / matrix.occupancy.sum()
    return float(np.dot(weights, row_entropies(matrix)))


@dataclass(frozen=True, eq=False)
class EntropyCurve:
    ks: np.ndarray
    values: np.ndarray
    k_star: int

    @property
    def h_star(self) -> float:
        return float(self.values[self.ks == self.k_star][0])

    def value(self, K: int) -> float:
        return float(self.values[self.ks == K][0])


def select_k(embedding, dataset, k_min: int = DEFAULT_K_MIN, k_max: int = DEFAULT_K_MAX,
             dendrogram=None) -> EntropyCurve:
    """Sweep ``K`` over ``[k_min, k_max]`` and return the entropy curve and its minimizer.

    One dendrogram is built (or reused) and cut at every ``K``. Ties in the minimum
    resolve to the smaller ``K``.
    """
    n = dataset.n_states
    if not 2 <= k_min <= k_max <= n:
        raise ConfigError(f"need 2 <= k_min <= k_max <= {n}, got {k_min}, {k_max}")
    if dendrogram is None:
        dendrogram = build_dendrogram(embedding)
    if dendrogram.n != n:
        raise AlignmentError("embedding and dataset sizes differ")
    ks = np.arange(k_min, k_max + 1)
    values = np.empty(ks.size)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyRowWarning)
        for idx, K in enumerate(ks):
            values[idx] = conditional_entropy(transition_counts(cut_dendrogram(dendrogram, int(K)), dataset))
    return EntropyCurve(ks, values, int(ks[int(np.argmin(values))]))


@dataclass(frozen=True)
class TransitionEdge:
    source: int
    target: int
    count: int
    prob: float
    dominant: bool


@dataclass(frozen=True)
class TransitionGraph:
    """Directed phase graph: nodes carry occupancy, edges observed transitions."""

    occupancy: tuple[int, ...]
    edges: tuple[TransitionEdge, ...]
    threshold: float

    @property
    def K(self) -> int:
        return len(self.occupancy)

    def out_edges(self, i: int) -> list[TransitionEdge]:
        return [e for e in self.edges if e.source == i]

    def dominant_targets(self, i: int) -> set[int]:
        return {e.target for e in self.edges if e.source == i and e.dominant}

    def dominant_edges(self) -> list[TransitionEdge]:
        return [e for e in self.edges if e.dominant]


def dominant_transitions(matrix: TransitionMatrix, threshold: float = DEFAULT_THRESHOLD) -> TransitionGraph:
    """Mark, per source phase, the shortest prefix of successors (by descending
    probability, ties to the smaller index) whose cumulative share strictly exceeds
    ``threshold``."""
    if not 0 < threshold < 1:
        raise ConfigError("threshold must lie in (0, 1)")
    # exact rational comparison so that an exactly-threshold prefix takes one more edge
    frac = Fraction(repr(float(threshold)))
    probs = matrix.probs
    edges = []
    for i in range(matrix.K):
        row = matrix.counts[i]
        total = int(row.sum())
        targets = [int(j) for j in np.flatnonzero(row)]
        targets.sort(key=lambda j: (-int(row[j]), j))
        dominant, cum = set(), 0
        for j in targets:
            dominant.add(j)
            cum += int(row[j])
            if Fraction(cum, total) > frac:
                break
        for j in sorted(targets):
            edges.append(TransitionEdge(i, j, int(row[j]), float(probs[i, j]), j in dominant))
    return TransitionGraph(tuple(int(v) for v in matrix.occupancy), tuple(edges), float(threshold))


def extract_cycles(graph: TransitionGraph, include_self_loops: bool = False, max_length: int | None = None):
    """All simple cycles of the dominant-edge subgraph.

    Each cycle is listed once, starting at its smallest phase, and the list is ordered
    by descending weakest-edge probability, then length.
    """
    K = graph.K
    max_length = K if max_length is None else max_length
    succ: dict[int, list[int]] = {i: [] for i in range(K)}
    prob = {}
    for e in graph.dominant_edges():
        succ[e.source].append(e.target)
        prob[(e.source, e.target)] = e.prob
    cycles = []
    for start in range(K):
        stack = [(start, [start])]
        while stack:
            node, path = stack.pop()
            for nxt in sorted(succ[node], reverse=True):
                if nxt == start:
                    if len(path) > 1 or include_self_loops:
                        cycles.append(path)
                elif nxt > start and nxt not in path and len(path) < max_length:
                    stack.append((nxt, path + [nxt]))

    def weakest(c):
        return min(prob[(c[t], c[(t + 1) % len(c)])] for t in range(len(c)))

    cycles.sort(key=lambda c: (-weakest(c), len(c), c))
    return cycles


def cycle_weakest_prob(graph: TransitionGraph, cycle) -> float:
    lookup = {(e.source, e.target): e.prob for e in graph.edges}
    return min(lookup[(cycle[t], cycle[(t + 1) % len(cycle)])] for t in range(len(cycle)))


# -- exports ------------------------------------------------------------------


def export_graph(graph: TransitionGraph, format: str = "dot") -> str:
    if format == "json":
        return json.dumps(
            {
                "threshold": graph.threshold,
                "nodes": [{"phase": i, "occupancy": n} for i, n in enumerate(graph.occupancy)],
                "edges": [
                    {"source": e.source, "target": e.target, "count": e.count, "prob": e.prob, "dominant": e.dominant}
                    for e in graph.edges
                ],
            },
            indent=2,
        ) + "\n"
    if format != "dot":
        raise ConfigError(f"unknown graph format {format!r}")
    lines = ["digraph phases {", "  node [shape=circle];"]
    for i, n in enumerate(graph.occupancy):
        lines.append(f'  p{i} [label="{i}\\nN={n}"];')
    for e in graph.edges:
        style = "style=bold, penwidth=2.5" if e.dominant else 'color="gray60"'
        lines.append(f'  p{e.source} -> p{e.target} [label="{e.prob:.3f}", {style}];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def graph_from_json(text: str) -> TransitionGraph:
    data = json.loads(text)
    nodes = sorted(data["nodes"], key=lambda d: d["phase"])
    return TransitionGraph(
        tuple(int(d["occupancy"]) for d in nodes),
        tuple(
            TransitionEdge(int(d["source"]), int(d["target"]), int(d["count"]), float(d["prob"]), bool(d["dominant"]))
            for d in data["edges"]
        ),
        float(data["threshold"]),
    )


def write_entropy_curve(curve: EntropyCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["K", "H_c"])
        for K, h in zip(curve.ks, curve.values):
            w.writerow([int(K), repr(float(h))])


def read_entropy_curve(path) -> EntropyCurve:
    ks, vals = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["K", "H_c"]:
            raise ParseError("entropy curve header must be 'K,H_c'", 1)
        for row in reader:
            if row:
                ks.append(int(row[0]))
                vals.append(float(row[1]))
    ks, vals = np.asarray(ks), np.asarray(vals)
    return EntropyCurve(ks, vals, int(ks[int(np.argmin(vals))]))


def write_transition_matrix(matrix: TransitionMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "N"] + [str(j) for j in range(matrix.K)])
        for i in range(matrix.K):
            w.writerow([i, int(matrix.occupancy[i])] + [int(c) for c in matrix.counts[i]])


def read_transition_matrix(path) -> TransitionMatrix:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows or rows[0][:2] != ["source", "N"]:
        raise ParseError("transition matrix header must start with 'source,N'", 1)
    body = np.asarray([[int(v) for v in r] for r in rows[1:]], dtype=np.int64)
    return TransitionMatrix(body.shape[0], body[:, 2:], body[:, 1])
