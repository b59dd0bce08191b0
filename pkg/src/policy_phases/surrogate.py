"""Per-phase additive surrogates of action outputs and their attribution heatmaps.

Each model predicts one action component as ``bias + sum_i shape_i(s_i)``. Shapes are
learned by cyclic gradient boosting: every round visits the features in a fixed order
and fits a small regression tree on that single feature against the current
residuals. Because every tree splits only on quantile-grid edges, the boosted
ensemble of one feature is exactly a piecewise-constant function on that grid.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import AlignmentError, ConfigError, DataError, EmptySubsetError, InsufficientDataError

MIN_SAMPLES = 20


class ConstantHeatmapWarning(UserWarning):
    pass


@dataclass(frozen=True)
class BoostingConfig:
    rounds: int = 50
    learning_rate: float = 0.1
    max_leaves: int = 3
    max_bins: int = 256
    bags: int = 0
    bag_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if not 0 < self.learning_rate <= 1:
            raise ConfigError("learning_rate must lie in (0, 1]")
        if self.max_leaves < 2:
            raise ConfigError("max_leaves must be >= 2")
        if self.max_bins < 2:
            raise ConfigError("max_bins must be >= 2")
        if self.bags < 0 or not 0 < self.bag_fraction <= 1:
            raise ConfigError("bags must be >= 0 and bag_fraction in (0, 1]")


@dataclass(frozen=True, eq=False)
class ShapeFunction:
    """Piecewise-constant contribution of one feature.

    Bin ``b`` covers ``[edges[b], edges[b+1])`` (the last bin is closed); values
    outside the training range fall into the boundary bins.
    """

    feature_index: int
    bin_edges: np.ndarray
    bin_values: np.ndarray

    def bin_index(self, x) -> np.ndarray:
        return np.searchsorted(self.bin_edges[1:-1], x, side="right")

    def __call__(self, x):
        return self.bin_values[self.bin_index(x)]

    @property
    def n_bins(self) -> int:
        return self.bin_values.size


@dataclass(frozen=True, eq=False)
class AdditiveSurrogate:
    phase: int
    action_dim: int
    bias: float
    shapes: tuple[ShapeFunction, ...]
    training_r2: float
    ss_res_trace: np.ndarray = field(default_factory=lambda: np.empty(0))
    n_samples: int = 0

    @property
    def n_features(self) -> int:
        return len(self.shapes)

    def contributions(self, states) -> np.ndarray:
        """Per-feature contributions, shape ``(n, D_s)`` (or ``(D_s,)`` for one state)."""
        X = np.asarray(states, dtype=np.float64)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.n_features:
            raise DataError(f"expected {self.n_features} features, got {X.shape[1]}")
        out = np.column_stack([sh(X[:, sh.feature_index]) for sh in self.shapes])
        return out[0] if single else out

    def predict(self, states) -> np.ndarray:
        c = self.contributions(states)
        return self.bias + c.sum(axis=-1)


def predict(model: AdditiveSurrogate, state):
    return model.predict(state)


def contributions(model: AdditiveSurrogate, state):
    return model.contributions(state)


def r2(targets, predictions) -> float:
    y = np.asarray(targets, dtype=np.float64)
    f = np.asarray(predictions, dtype=np.float64)
    ss_res = float(np.sum((y - f) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else float("nan")
    return 1.0 - ss_res / ss_tot


def r2_score(model: AdditiveSurrogate, states, targets) -> float:
    """Coefficient of determination; NaN when the targets are constant but mispredicted."""
    y = np.asarray(targets, dtype=np.float64)
    if y.size < 2:
        raise InsufficientDataError("r2 needs at least 2 samples")
    return r2(y, model.predict(states))


def quantile_edges(x, max_bins):
    edges = np.unique(np.quantile(x, np.linspace(0.0, 1.0, max_bins + 1)))
    if edges.size < 2:
        v = float(edges[0])
        edges = np.array([v - 0.5, v + 0.5])
    return edges


@numba.njit(cache=True)
def _best_split(S, C, lo, hi):
    tot_s = 0.0
    tot_c = 0.0
    for b in range(lo, hi):
        tot_s += S[b]
        tot_c += C[b]
    best = 0.0
    arg = -1
    if tot_c == 0.0:
        return best, arg
    base = tot_s * tot_s / tot_c
    ls = 0.0
    lc = 0.0
    for t in range(lo + 1, hi):
        ls += S[t - 1]
        lc += C[t - 1]
        rc = tot_c - lc
        if lc == 0.0 or rc == 0.0:
            continue
        rs = tot_s - ls
        g = ls * ls / lc + rs * rs / rc - base
        if g > best:
            best = g
            arg = t
    return best, arg


@numba.njit(cache=True)
def _fit_tree(S, C, max_leaves):
    """Best-first tree on binned residual sums; returns per-bin leaf means and total gain."""
    nb = S.shape[0]
    lo = np.empty(max_leaves, dtype=np.int64)
    hi = np.empty(max_leaves, dtype=np.int64)
    lo[0] = 0
    hi[0] = nb
    n_seg = 1
    total = 0.0
    while n_seg < max_leaves:
        best = 0.0
        which = -1
        cut = -1
        for s in range(n_seg):
            g, t = _best_split(S, C, lo[s], hi[s])
            if t >= 0 and g > best:
                best = g
                which = s
                cut = t
        if which < 0:
            break
        lo[n_seg] = cut
        hi[n_seg] = hi[which]
        hi[which] = cut
        n_seg += 1
        total += best
    values = np.zeros(nb)
    for s in range(n_seg):
        ss = 0.0
        cc = 0.0
        for b in range(lo[s], hi[s]):
            ss += S[b]
            cc += C[b]
        if cc > 0.0:
            m = ss / cc
            for b in range(lo[s], hi[s]):
                values[b] = m
    return values, total


def _boost(bins, counts, n_bins, active, y, cfg):
    """Cyclic boosting on pre-binned features; returns per-feature bin values, intercept, trace."""
    intercept = float(y.mean())
    r = y - intercept
    values = [np.zeros(nb) for nb in n_bins]
    trace = [float(r @ r)]
    for _ in range(cfg.rounds):
        for f in active:
            S = np.bincount(bins[f], weights=r, minlength=n_bins[f])
            leaf, gain = _fit_tree(S, counts[f], cfg.max_leaves)
            if gain <= 0.0:
                continue
            step = cfg.learning_rate * leaf
            values[f] += step
            r = r - step[bins[f]]
        trace.append(float(r @ r))
    return values, intercept, np.asarray(trace)


def fit_surrogate(states, targets, config: BoostingConfig | None = None, *, phase: int = -1,
                  action_dim: int = -1) -> AdditiveSurrogate:
    """Fit ``target ~ bias + sum_i shape_i(state_i)`` by cyclic boosting.

    Raises :class:`InsufficientDataError` below 20 samples. Constant features keep an
    identically-zero shape. The fit does not depend on sample order.
    """
    cfg = config or BoostingConfig()
    X = np.asarray(states, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise DataError("states must be (n, D) and aligned with targets")
    if y.size < MIN_SAMPLES:
        raise InsufficientDataError(f"need at least {MIN_SAMPLES} samples, got {y.size}")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise DataError("non-finite states or targets")

    # canonical sample order makes every floating-point reduction order-free
    order = np.lexsort(np.column_stack([X, y]).T[::-1])
    X, y = X[order], y[order]
    n, D = X.shape

    edges = [quantile_edges(X[:, f], cfg.max_bins) for f in range(D)]
    n_bins = [e.size - 1 for e in edges]
    bins = [np.searchsorted(e[1:-1], X[:, f], side="right") for f, e in enumerate(edges)]
    active = [f for f in range(D) if X[:, f].min() < X[:, f].max()]

    if cfg.bags == 0:
        counts = [np.bincount(b, minlength=nb).astype(np.float64) for b, nb in zip(bins, n_bins)]
        values, intercept, trace = _boost(bins, counts, n_bins, active, y, cfg)
    else:
        rng = np.random.default_rng(cfg.seed)
        m = max(MIN_SAMPLES, int(round(cfg.bag_fraction * n)))
        m = min(m, n)
        acc = [np.zeros(nb) for nb in n_bins]
        intercepts = []
        for _ in range(cfg.bags):
            idx = np.sort(rng.choice(n, size=m, replace=False))
            sub_bins = [b[idx] for b in bins]
            counts = [np.bincount(b, minlength=nb).astype(np.float64) for b, nb in zip(sub_bins, n_bins)]
            vals, icpt, _ = _boost(sub_bins, counts, n_bins, active, y[idx], cfg)
            for f in range(D):
                acc[f] += vals[f]
            intercepts.append(icpt)
        values = [a / cfg.bags for a in acc]
        intercept = float(np.mean(intercepts))
        trace = np.empty(0)

    bias = intercept
    shapes = []
    for f in range(D):
        v = values[f]
        offset = float(v[bins[f]].mean())
        v = v - offset
        bias += offset
        v.setflags(write=False)
        edges[f].setflags(write=False)
        shapes.append(ShapeFunction(f, edges[f], v))

    model = AdditiveSurrogate(phase, action_dim, float(bias), tuple(shapes), 0.0, trace, n)
    object.__setattr__(model, "training_r2", r2(y, model.predict(X)))
    return model


# -- attribution -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AttributionHeatmap:
    """Mean absolute contribution of each state feature (rows) to each action (columns)."""

    values: np.ndarray
    normalized: np.ndarray
    top_mask: np.ndarray
    rule: str = "max"

    def top_cells(self) -> set[tuple[int, int]]:
        return {(int(i), int(d)) for i, d in zip(*np.nonzero(self.top_mask))}


TOP_FRACTION = 0.95


def attribution_heatmap(models, states, rule: str = "max", top: float = TOP_FRACTION) -> AttributionHeatmap:
    """Heatmap of mean |contribution| over ``states`` for one phase's per-action models.

    ``rule="max"`` marks cells whose min-max normalized value is at least ``top``;
    ``rule="quantile"`` marks cells at or above the ``top`` quantile of all cell values.
    """
    if rule not in ("max", "quantile"):
        raise ConfigError(f"unknown top rule {rule!r}")
    X = np.asarray(states, dtype=np.float64)
    values = np.column_stack([np.abs(m.contributions(X)).mean(axis=0) for m in models])
    lo, hi = values.min(), values.max()
    if hi > lo:
        normalized = (values - lo) / (hi - lo)
    else:
        warnings.warn("attribution values are constant; no cell is marked", ConstantHeatmapWarning, stacklevel=2)
        normalized = np.zeros_like(values)
    return AttributionHeatmap(values, normalized, top_mask(values, rule, top), rule)


def top_mask(values, rule: str = "max", top: float = TOP_FRACTION) -> np.ndarray:
    """Boolean mask of the "top" heatmap cells under either rule; empty for constant values."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if not hi > lo:
        return np.zeros(values.shape, dtype=bool)
    if rule == "max":
        return (values - lo) / (hi - lo) >= top
    if rule == "quantile":
        return values >= np.quantile(values, top)
    raise ConfigError(f"unknown top rule {rule!r}")


def attribution_gap(heat_a: AttributionHeatmap, heat_b: AttributionHeatmap) -> np.ndarray:
    """Per-feature L1 gap (summed over actions) between two heatmaps' raw values."""
    return np.abs(heat_b.values - heat_a.values).sum(axis=1)


# -- phase-wise fitting and branch analysis ---------------------------------


def fit_phase_surrogates(assignment, dataset, config: BoostingConfig | None = None, phases=None):
    """Fit one surrogate per (phase, action dimension); returns ``{(phase, d): model}``."""
    cfg = config or BoostingConfig()
    labels = assignment.labels
    phases = range(assignment.K) if phases is None else phases
    models = {}
    for p in phases:
        mask = labels == p
        X, A = dataset.states[mask], dataset.actions[mask]
        for d in range(A.shape[1]):
            models[(p, d)] = fit_surrogate(X, A[:, d], cfg, phase=p, action_dim=d)
    return models


@dataclass(frozen=True, eq=False)
class BranchSplit:
    phase: int
    successor_a: int
    successor_b: int
    states_a: np.ndarray
    actions_a: np.ndarray
    states_b: np.ndarray
    actions_b: np.ndarray
    runs_a: int
    runs_b: int
    dropped_runs: int
    dropped_states: int


def phase_runs(labels, dataset, phase):
    """Yield ``(start, stop, exit_label_or_None)`` for each contiguous run of ``phase``."""
    off = dataset.episode_offsets
    for e in range(len(dataset.episodes)):
        lo, hi = int(off[e]), int(off[e + 1])
        t = lo
        while t < hi:
            if labels[t] != phase:
                t += 1
                continue
            start = t
            while t < hi and labels[t] == phase:
                t += 1
            yield start, t, (int(labels[t]) if t < hi else None)


def branch_split(assignment, dataset, phase: int, successor_a: int, successor_b: int) -> BranchSplit:
    """Split a phase's visits by the phase entered when each run ends.

    Whole runs go to the subset of their exit successor; runs exiting elsewhere or
    ending with the episode are dropped and counted.
    """
    labels = assignment.labels
    if labels.size != dataset.n_states:
        raise AlignmentError("assignment and dataset sizes differ")
    rows_a, rows_b = [], []
    runs_a = runs_b = dropped_runs = dropped_states = 0
    for start, stop, nxt in phase_runs(labels, dataset, phase):
        if nxt == successor_a:
            rows_a.extend(range(start, stop))
            runs_a += 1
        elif nxt == successor_b:
            rows_b.extend(range(start, stop))
            runs_b += 1
        else:
            dropped_runs += 1
            dropped_states += stop - start
    for succ, runs in ((successor_a, runs_a), (successor_b, runs_b)):
        if runs == 0:
            raise EmptySubsetError(f"phase {phase} never exits to successor {succ}")
    ia, ib = np.asarray(rows_a, dtype=np.int64), np.asarray(rows_b, dtype=np.int64)
    return BranchSplit(
        phase, successor_a, successor_b,
        dataset.states[ia], dataset.actions[ia], dataset.states[ib], dataset.actions[ib],
        runs_a, runs_b, dropped_runs, dropped_states,
    )


def branch_heatmaps(split: BranchSplit, config: BoostingConfig | None = None, rule="max"):
    """Fit separate surrogates on each exit subset and return both heatmaps and the feature gap."""
    cfg = config or BoostingConfig()
    out = []
    for X, A, succ in ((split.states_a, split.actions_a, split.successor_a),
                       (split.states_b, split.actions_b, split.successor_b)):
        models = [fit_surrogate(X, A[:, d], cfg, phase=split.phase, action_dim=d) for d in range(A.shape[1])]
        out.append((models, attribution_heatmap(models, X, rule)))
    (models_a, heat_a), (models_b, heat_b) = out
    return heat_a, heat_b, attribution_gap(heat_a, heat_b), models_a, models_b


# -- file formats -------------------------------------------------------------


def model_to_dict(model: AdditiveSurrogate, schema=None) -> dict:
    names = schema.state_names if schema is not None else [f"x{i}" for i in range(model.n_features)]
    out = {
        "phase": model.phase,
        "action_dim": model.action_dim,
        "bias": model.bias,
        "training_r2": model.training_r2,
        "n_samples": model.n_samples,
        "features": [
            {"index": sh.feature_index, "name": names[sh.feature_index],
             "bin_edges": [float(v) for v in sh.bin_edges], "bin_values": [float(v) for v in sh.bin_values]}
            for sh in model.shapes
        ],
    }
    if schema is not None:
        out["action_name"] = schema.action_names[model.action_dim]
    return out


def model_from_dict(data: dict) -> AdditiveSurrogate:
    shapes = tuple(
        ShapeFunction(int(f["index"]), np.asarray(f["bin_edges"], dtype=np.float64),
                      np.asarray(f["bin_values"], dtype=np.float64))
        for f in data["features"]
    )
    return AdditiveSurrogate(int(data["phase"]), int(data["action_dim"]), float(data["bias"]), shapes,
                             float(data["training_r2"]), np.empty(0), int(data.get("n_samples", 0)))


def write_models(models, path, schema=None) -> None:
    payload = [model_to_dict(m, schema) for _, m in sorted(models.items())]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def read_models(path) -> dict:
    with open(path) as fh:
        payload = json.load(fh)
    return {(int(d["phase"]), int(d["action_dim"])): model_from_dict(d) for d in payload}


def write_heatmap_csv(heatmap: AttributionHeatmap, schema, path, mask_path=None) -> None:
    for target, grid, fmt in ((path, heatmap.values, lambda v: repr(float(v))),
                              (mask_path, heatmap.top_mask, lambda v: str(int(v)))):
        if target is None:
            continue
        with open(target, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature"] + list(schema.action_names))
            for i, name in enumerate(schema.state_names):
                w.writerow([name] + [fmt(v) for v in grid[i]])
