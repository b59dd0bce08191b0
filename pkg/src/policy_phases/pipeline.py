"""Stage functions and the end-to-end run.

Every stage reads plain in-memory inputs and writes its artifacts through a
:class:`BundleWriter`. The CLI stage commands load the same inputs from bundle
files and call the same functions, so an isolated stage reproduces the files a
full run writes byte for byte.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import platform
import shutil
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from importlib import metadata
from pathlib import Path

import numpy as np

from . import clustering, embedding, phase_graph, surrogate
from .config import PipelineConfig, derive_seed, dump_config, tomllib
from .dataset import (
    FeatureSchema,
    TrajectoryDataset,
    generate_synthetic,
    load_schema,
    load_trajectories,
    write_schema,
    write_trajectories,
)
from .errors import EmptySubsetError, InsufficientDataError, PhaseAnalysisError, StageError
from .report import format_summary, heatmap_svg

# bundle layout
DATASET = "dataset.csv"
SCHEMA = "schema.toml"
TRUTH = "truth_assignment.csv"
CONFIG = "config.toml"
EMBEDDING = "embedding.csv"
LOSS = "loss_trace.csv"
CURVE = "entropy_curve.csv"
ASSIGNMENT = "assignment.csv"
MATRIX = "transition_matrix.csv"
PHASES = "phase_entropy.csv"
GRAPH_DOT = "graph.dot"
GRAPH_JSON = "graph.json"
R2_TABLE = "r2.csv"
MODELS_DIR = "models"
HEATMAP_DIR = "heatmaps"
BRANCH_DIR = "branches"
BRANCH_INDEX = "branches/index.csv"
SUMMARY = "summary.txt"
MANIFEST = "manifest.json"
LOCK = ".lock"
FAILED = "failed"

STAGES = ("ingest", "embed", "sweep", "graph", "surrogate", "report")


class BundleLockedError(PhaseAnalysisError, OSError):
    """Another process holds the output directory."""


class BundleWriter:
    """Tracks the files a run creates under ``root``."""

    def __init__(self, root):
        self.root = Path(root)
        self.written: list[Path] = []

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        if p not in self.written:
            self.written.append(p)
        return p

    def write_text(self, rel: str, text: str) -> Path:
        p = self.path(rel)
        p.write_text(text)
        return p

    def write_csv(self, rel: str, header, rows) -> Path:
        p = self.path(rel)
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        return p

    def quarantine(self) -> Path:
        """Move everything this writer produced under ``failed/``."""
        dest_root = self.root / FAILED
        for p in self.written:
            if p.exists():
                dest = dest_root / p.relative_to(self.root)
                dest.parent.mkdir(parents=True, exist_ok=True)
                shutil.move(str(p), str(dest))
        for p in sorted({q.parent for q in self.written}, key=lambda d: len(d.parts), reverse=True):
            if p != self.root and p.exists() and not any(p.iterdir()):
                p.rmdir()
        return dest_root


@contextmanager
def bundle_lock(root):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lock = root / LOCK
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise BundleLockedError(f"{root} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


@contextmanager
def stage(name: str, writer: BundleWriter | None = None):
    """Wrap a stage: any failure becomes a :class:`StageError` and partial outputs are quarantined."""
    try:
        yield
    except Exception as exc:
        if writer is not None:
            dest = writer.quarantine()
            dest.mkdir(parents=True, exist_ok=True)
            (dest / "error.txt").write_text(f"stage: {name}\n{type(exc).__name__}: {exc}\n")
        if isinstance(exc, StageError):
            raise
        raise StageError(name, exc) from exc


# -- stages -------------------------------------------------------------------


def stage_ingest(cfg: PipelineConfig, writer: BundleWriter):
    """Load or generate the dataset and copy it (with its schema and the config) into the bundle."""
    writer.write_text(CONFIG, dump_config(cfg))
    if cfg.synthetic is not None:
        dataset, truth = generate_synthetic(cfg.resolved_synthetic())
        clustering.write_assignment(truth, dataset, writer.path(TRUTH))
    else:
        dataset = load_trajectories(cfg.input, load_schema(cfg.schema))
    write_trajectories(dataset, writer.path(DATASET))
    write_schema(dataset.schema, writer.path(SCHEMA))
    return dataset


def stage_embed(dataset: TrajectoryDataset, cfg: PipelineConfig, writer: BundleWriter):
    source = dataset.standardized() if cfg.embed_standardize else dataset
    graph = embedding.build_fuzzy_graph(source, cfg.embed_k)
    emb = embedding.optimize_embedding(
        graph, cfg.embed_epochs, cfg.embed_learning_rate, cfg.embed_negatives, derive_seed(cfg.seed, "embed")
    )
    embedding.write_embedding(emb, dataset, writer.path(EMBEDDING))
    embedding.write_loss_trace(emb, writer.path(LOSS))
    return emb.coords


def stage_sweep(coords, dataset: TrajectoryDataset, cfg: PipelineConfig, writer: BundleWriter):
    dendro = clustering.build_dendrogram(coords)
    curve = phase_graph.select_k(coords, dataset, cfg.k_min, cfg.k_max, dendrogram=dendro)
    assignment = clustering.cut_dendrogram(dendro, curve.k_star)
    phase_graph.write_entropy_curve(curve, writer.path(CURVE))
    clustering.write_assignment(assignment, dataset, writer.path(ASSIGNMENT))
    return assignment


def stage_graph(assignment, dataset: TrajectoryDataset, cfg: PipelineConfig, writer: BundleWriter):
    matrix = phase_graph.transition_counts(assignment, dataset)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", phase_graph.EmptyRowWarning)
        h = phase_graph.row_entropies(matrix)
    graph = phase_graph.dominant_transitions(matrix, cfg.threshold)
    phase_graph.write_transition_matrix(matrix, writer.path(MATRIX))
    writer.write_csv(
        PHASES,
        ["phase", "N", "transitions", "H_i", "dominant"],
        [
            [i, int(matrix.occupancy[i]), int(matrix.row_totals[i]), repr(float(h[i])),
             " ".join(str(t) for t in sorted(graph.dominant_targets(i)))]
            for i in range(matrix.K)
        ],
    )
    writer.write_text(GRAPH_DOT, phase_graph.export_graph(graph, "dot"))
    writer.write_text(GRAPH_JSON, phase_graph.export_graph(graph, "json"))
    return graph


def _auto_branches(graph) -> list[tuple[int, int, int]]:
    out = []
    for i in range(graph.K):
        dom = [e for e in graph.out_edges(i) if e.dominant]
        if len(dom) >= 2:
            dom.sort(key=lambda e: (-e.count, e.target))
            a, b = sorted((dom[0].target, dom[1].target))
            out.append((i, a, b))
    return out


def _write_heatmap(writer: BundleWriter, stem: str, heat, schema: FeatureSchema, title: str):
    surrogate.write_heatmap_csv(heat, schema, writer.path(stem + ".csv"), writer.path(stem + "_mask.csv"))
    # the other top rule is written alongside so both readings are available
    other = "quantile" if heat.rule == "max" else "max"
    alt = replace(heat, top_mask=surrogate.top_mask(heat.values, other), rule=other)
    surrogate.write_heatmap_csv(alt, schema, None, writer.path(f"{stem}_mask_{other}.csv"))
    writer.write_text(stem + ".svg", heatmap_svg(heat.normalized, heat.top_mask, schema.state_names,
                                                 schema.action_names, title))


def stage_surrogate(assignment, dataset: TrajectoryDataset, cfg: PipelineConfig, writer: BundleWriter):
    """Per-phase surrogates, R2 table, heatmaps and branch-conditioned heatmaps."""
    schema = dataset.schema
    boost = replace(cfg.boosting, seed=derive_seed(cfg.seed, "surrogate"))
    rng = np.random.default_rng(derive_seed(cfg.seed, "holdout"))
    labels = assignment.labels
    r2_rows = []
    models_out = {}
    for p in range(assignment.K):
        idx = np.flatnonzero(labels == p)
        if cfg.holdout > 0:
            perm = rng.permutation(idx.size)
            n_test = int(round(cfg.holdout * idx.size))
            test, train = np.sort(idx[perm[:n_test]]), np.sort(idx[perm[n_test:]])
        else:
            test, train = idx[:0], idx
        X, A = dataset.states[train], dataset.actions[train]
        try:
            models = [surrogate.fit_surrogate(X, A[:, d], boost, phase=p, action_dim=d) for d in range(A.shape[1])]
        except InsufficientDataError:
            r2_rows.append([p, "train", train.size, "skipped: insufficient data"] + [""] * (A.shape[1] + 1))
            continue
        models_out[p] = models
        surrogate.write_models({(p, d): m for d, m in enumerate(models)},
                               writer.path(f"{MODELS_DIR}/phase_{p}.json"), schema)
        scores = [m.training_r2 for m in models]
        r2_rows.append([p, "train", train.size, "ok"] + [repr(float(v)) for v in scores]
                       + [repr(float(np.mean(scores)))])
        if test.size:
            Xt, At = dataset.states[test], dataset.actions[test]
            scores = [surrogate.r2(At[:, d], m.predict(Xt)) for d, m in enumerate(models)]
            r2_rows.append([p, "holdout", test.size, "ok"] + [repr(float(v)) for v in scores]
                           + [repr(float(np.mean(scores)))])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", surrogate.ConstantHeatmapWarning)
            heat = surrogate.attribution_heatmap(models, X, cfg.top_rule)
        _write_heatmap(writer, f"{HEATMAP_DIR}/phase_{p}", heat, schema, f"phase {p}")
    writer.write_csv(
        R2_TABLE,
        ["phase", "split", "n", "status"] + [f"r2_{a}" for a in schema.action_names] + ["r2_mean"],
        r2_rows,
    )

    requests = list(cfg.branches)
    if not requests and cfg.branch_auto:
        matrix = phase_graph.transition_counts(assignment, dataset)
        requests = _auto_branches(phase_graph.dominant_transitions(matrix, cfg.threshold))
    index_rows = []
    for p, a, b in requests:
        try:
            split = surrogate.branch_split(assignment, dataset, p, a, b)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", surrogate.ConstantHeatmapWarning)
                heat_a, heat_b, gap, _, _ = surrogate.branch_heatmaps(split, boost, cfg.top_rule)
        except (EmptySubsetError, InsufficientDataError) as exc:
            if cfg.branches:
                raise
            index_rows.append([p, a, b, "", "", "", "", f"skipped: {exc}"])
            continue
        stem = f"{BRANCH_DIR}/phase_{p}"
        _write_heatmap(writer, f"{stem}_to_{a}", heat_a, schema, f"phase {p} exiting to {a}")
        _write_heatmap(writer, f"{stem}_to_{b}", heat_b, schema, f"phase {p} exiting to {b}")
        order = sorted(range(gap.size), key=lambda i: (-gap[i], i))
        writer.write_csv(
            f"{stem}_{a}_vs_{b}_gap.csv",
            ["rank", "feature", "gap"],
            [[r + 1, schema.state_names[i], repr(float(gap[i]))] for r, i in enumerate(order)],
        )
        index_rows.append([p, a, b, split.runs_a, split.runs_b, split.dropped_runs, split.dropped_states, "ok"])
    writer.write_csv(
        BRANCH_INDEX,
        ["phase", "successor_a", "successor_b", "runs_a", "runs_b", "dropped_runs", "dropped_states", "status"],
        index_rows,
    )
    return models_out


# -- report -------------------------------------------------------------------


def _read_rows(path: Path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summarize_bundle(root, top_features: int = 3) -> str:
    """Build the summary text from the bundle files present under ``root``."""
    root = Path(root)
    notes = []
    curve = phase_graph.read_entropy_curve(root / CURVE)
    graph = phase_graph.graph_from_json((root / GRAPH_JSON).read_text())
    cycles = [(c, phase_graph.cycle_weakest_prob(graph, c)) for c in phase_graph.extract_cycles(graph)]
    row_entropy = [
        (int(r["phase"]), int(r["N"]), float(r["H_i"]), [int(t) for t in r["dominant"].split()])
        for r in _read_rows(root / PHASES)
    ]
    r2_rows = []
    if (root / R2_TABLE).exists():
        for r in _read_rows(root / R2_TABLE):
            dims = [k for k in r if k.startswith("r2_") and k != "r2_mean"]
            ok = r["status"] == "ok"
            r2_rows.append((int(r["phase"]), r["split"], int(r["n"]),
                            [float(r[k]) for k in dims] if ok else [],
                            float(r["r2_mean"]) if ok else float("nan"), r["status"]))
    else:
        notes.append("surrogate stage outputs not found")
    branch_rows = []
    if (root / BRANCH_INDEX).exists():
        for r in _read_rows(root / BRANCH_INDEX):
            p, a, b = int(r["phase"]), int(r["successor_a"]), int(r["successor_b"])
            row = {"phase": p, "a": a, "b": b, "status": r["status"]}
            if r["status"] == "ok":
                gaps = _read_rows(root / BRANCH_DIR / f"phase_{p}_{a}_vs_{b}_gap.csv")
                row.update(runs_a=int(r["runs_a"]), runs_b=int(r["runs_b"]),
                           top=[(g["feature"], float(g["gap"])) for g in gaps[:top_features]])
            branch_rows.append(row)
    return format_summary(
        k_star=curve.k_star, h_star=curve.h_star, cycles=cycles, row_entropy=row_entropy,
        r2_rows=r2_rows, branch_rows=branch_rows, notes=notes,
    )


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for dist in ("artifact", "numpy", "scipy", "numba"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[dist] = "unknown"
    return out


def build_manifest(root) -> dict:
    """Hash every file under ``root`` except the manifest, the lock and ``failed/``."""
    root = Path(root)
    files = {}
    for p in sorted(root.rglob("*")):
        rel = p.relative_to(root).as_posix()
        if not p.is_file() or rel in (MANIFEST, LOCK) or rel.split("/")[0] == FAILED:
            continue
        files[rel] = _sha256(p)
    config = None
    if (root / CONFIG).exists():
        config = tomllib.loads((root / CONFIG).read_text())
    return {"manifest_version": 1, "config": config, "versions": _versions(), "files": files}


def stage_report(writer: BundleWriter) -> dict:
    writer.write_text(SUMMARY, summarize_bundle(writer.root))
    manifest = build_manifest(writer.root)
    writer.write_text(MANIFEST, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def verify_manifest(root) -> list[str]:
    """Return the relative paths whose content no longer matches the manifest."""
    root = Path(root)
    manifest = json.loads((root / MANIFEST).read_text())
    current = build_manifest(root)["files"]
    bad = [rel for rel, h in manifest["files"].items() if current.get(rel) != h]
    bad += [rel for rel in current if rel not in manifest["files"]]
    return sorted(bad)


# -- full run -----------------------------------------------------------------


@dataclass
class ReportBundle:
    root: Path
    manifest: dict
    k_star: int = 0
    h_star: float = float("nan")
    files: list[str] = field(default_factory=list)

    def path(self, rel: str) -> Path:
        return self.root / rel


def run_pipeline(config: PipelineConfig, out=None) -> ReportBundle:
    """Validate, then run every stage in order into ``out`` (default ``config.out``)."""
    config.validate()
    root = Path(out if out is not None else config.out)
    with bundle_lock(root):
        writer = BundleWriter(root)
        with stage("ingest", writer):
            dataset = stage_ingest(config, writer)
        with stage("embed", writer):
            coords = stage_embed(dataset, config, writer)
        with stage("sweep", writer):
            assignment = stage_sweep(coords, dataset, config, writer)
        with stage("graph", writer):
            stage_graph(assignment, dataset, config, writer)
        with stage("surrogate", writer):
            stage_surrogate(assignment, dataset, config, writer)
        with stage("report", writer):
            manifest = stage_report(writer)
    curve = phase_graph.read_entropy_curve(root / CURVE)
    return ReportBundle(root, manifest, curve.k_star, curve.h_star, sorted(manifest["files"]))


# -- helpers for isolated stages ----------------------------------------------


def load_bundle_dataset(dataset_path, schema_path) -> TrajectoryDataset:
    return load_trajectories(dataset_path, load_schema(schema_path))


def load_bundle_embedding(path, dataset: TrajectoryDataset) -> np.ndarray:
    eps, steps, coords = embedding.read_embedding(path)
    clustering.check_alignment(dataset, eps, steps)
    return coords


__all__ = [
    "BundleWriter", "BundleLockedError", "ReportBundle", "run_pipeline", "stage", "bundle_lock",
    "stage_ingest", "stage_embed", "stage_sweep", "stage_graph", "stage_surrogate", "stage_report",
    "summarize_bundle", "build_manifest", "verify_manifest", "load_bundle_dataset", "load_bundle_embedding",
]
