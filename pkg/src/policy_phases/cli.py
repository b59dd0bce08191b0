"""Command-line entry point: ``policy-phases <subcommand> [options]``.

Exit codes: 0 success, 1 validation error, 2 stage failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline as pl
from .clustering import read_assignment
from .config import PipelineConfig, dump_config, load_config, parse_branch_request, with_overrides
from .dataset import SyntheticConfig, parse_branch
from .errors import ConfigError, PhaseAnalysisError, StageError

EXIT_OK, EXIT_VALIDATION, EXIT_STAGE, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", type=Path, help="flat TOML configuration file")
    p.add_argument("--seed", type=int, help="top-level seed (stage seeds are derived from it)")
    p.add_argument("--out", type=Path, help="output (bundle) directory")


def _inputs(p, *names):
    for name in names:
        p.add_argument(f"--{name}", type=Path, help=f"input {name} file (default: inside --out)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="policy-phases", description="Phase structure and additive explanations of policy trajectories.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="emit a synthetic phase-cycle dataset")
    _common(p)
    p.add_argument("--phases", type=int)
    p.add_argument("--steps-per-phase", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--state-dim", type=int)
    p.add_argument("--action-dim", type=int)
    p.add_argument("--action-noise", type=float)
    p.add_argument("--branch", help="phase:target_a:target_b:prob_a[:feature[:gain]]")

    p = sub.add_parser("embed", help="2-D embedding of the states")
    _common(p)
    _inputs(p, "dataset", "schema")
    p.add_argument("--k", type=int, dest="embed_k")
    p.add_argument("--epochs", type=int, dest="embed_epochs")
    p.add_argument("--learning-rate", type=float, dest="embed_learning_rate")
    p.add_argument("--negatives", type=int, dest="embed_negatives")
    p.add_argument("--standardize", action="store_const", const=True, dest="embed_standardize")

    p = sub.add_parser("sweep", help="Ward clustering and entropy sweep over K")
    _common(p)
    _inputs(p, "embedding", "dataset", "schema")
    p.add_argument("--k-min", type=int)
    p.add_argument("--k-max", type=int)

    p = sub.add_parser("graph", help="transition matrix and dominant-transition graph")
    _common(p)
    _inputs(p, "assignment", "dataset", "schema")
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("surrogate", help="per-phase additive surrogates, heatmaps and branch analysis")
    _common(p)
    _inputs(p, "assignment", "dataset", "schema")
    p.add_argument("--threshold", type=float)
    p.add_argument("--rounds", type=int)
    p.add_argument("--boost-learning-rate", type=float)
    p.add_argument("--max-leaves", type=int)
    p.add_argument("--max-bins", type=int)
    p.add_argument("--bags", type=int)
    p.add_argument("--top-rule", choices=("max", "quantile"))
    p.add_argument("--holdout", type=float)
    p.add_argument("--branch", action="append", dest="branch_requests", metavar="PHASE:A:B",
                   help="successor pair to analyse (repeatable; default: every branching phase)")

    p = sub.add_parser("report", help="summary text and manifest for a bundle")
    _common(p)

    p = sub.add_parser("run", help="full pipeline")
    _common(p)
    p.add_argument("--input", type=Path)
    p.add_argument("--schema", type=Path)
    return parser


def _base_config(args) -> PipelineConfig:
    if args.config is not None:
        cfg = load_config(args.config)
    else:
        cfg = PipelineConfig()
        # later stages inherit the settings recorded in an existing bundle
        bundled = Path(args.out if args.out is not None else cfg.out) / pl.CONFIG
        if args.command not in ("synth", "run") and bundled.exists():
            cfg = load_config(bundled)
    out = str(args.out) if args.out is not None else cfg.out
    return with_overrides(cfg, seed=args.seed, out=out)


def _synthetic_config(args, cfg: PipelineConfig) -> PipelineConfig:
    base = cfg.synthetic or SyntheticConfig()
    changes = {
        name: getattr(args, attr)
        for attr, name in (
            ("phases", "n_phases"), ("steps_per_phase", "steps_per_phase"), ("episodes", "episodes"),
            ("steps", "steps"), ("noise_sigma", "noise_sigma"), ("state_dim", "state_dim"),
            ("action_dim", "action_dim"), ("action_noise", "action_noise"),
        )
        if getattr(args, attr) is not None
    }
    if args.branch is not None:
        changes["branch"] = parse_branch(args.branch)
    return replace(cfg, synthetic=replace(base, **changes), input=None, schema=None)


def _boosting(args, cfg: PipelineConfig) -> PipelineConfig:
    changes = {
        name: getattr(args, attr)
        for attr, name in (("rounds", "rounds"), ("boost_learning_rate", "learning_rate"),
                           ("max_leaves", "max_leaves"), ("max_bins", "max_bins"), ("bags", "bags"))
        if getattr(args, attr) is not None
    }
    boosting = replace(cfg.boosting, **changes) if changes else cfg.boosting
    branches = cfg.branches
    if args.branch_requests:
        branches = tuple(parse_branch_request(b) for b in args.branch_requests)
    return with_overrides(cfg, boosting=boosting, branches=branches, threshold=args.threshold,
                          top_rule=args.top_rule, holdout=args.holdout)


def _in(args, name, root: Path, default: str) -> Path:
    value = getattr(args, name, None)
    return Path(value) if value is not None else root / default


def _run_stage(name, root: Path, body):
    with pl.bundle_lock(root):
        writer = pl.BundleWriter(root)
        with pl.stage(name, writer):
            body(writer)


def _dispatch(args) -> None:
    cfg = _base_config(args)
    root = Path(cfg.out)
    cmd = args.command

    if cmd == "run":
        if args.input is not None:
            cfg = replace(cfg, input=str(args.input), synthetic=None)
        if args.schema is not None:
            cfg = replace(cfg, schema=str(args.schema))
        bundle = pl.run_pipeline(cfg.validate(), root)
        print(f"K* = {bundle.k_star}, H_c = {bundle.h_star:.6f}; bundle written to {bundle.root}")
        return

    if cmd == "synth":
        cfg = _synthetic_config(args, cfg).validate()
        _run_stage("ingest", root, lambda w: pl.stage_ingest(cfg, w))
        return

    if cmd == "report":
        _run_stage("report", root, pl.stage_report)
        print((root / pl.SUMMARY).read_text(), end="")
        return

    if cmd == "embed":
        cfg = with_overrides(cfg, **{k: getattr(args, k) for k in (
            "embed_k", "embed_epochs", "embed_learning_rate", "embed_negatives", "embed_standardize")})
    elif cmd == "sweep":
        cfg = with_overrides(cfg, k_min=args.k_min, k_max=args.k_max)
    elif cmd == "graph":
        cfg = with_overrides(cfg, threshold=args.threshold)
    elif cmd == "surrogate":
        cfg = _boosting(args, cfg)
    cfg.validate(require_source=False)

    def body(writer):
        dataset = pl.load_bundle_dataset(_in(args, "dataset", root, pl.DATASET), _in(args, "schema", root, pl.SCHEMA))
        if cmd == "embed":
            pl.stage_embed(dataset, cfg, writer)
        elif cmd == "sweep":
            pl.stage_sweep(pl.load_bundle_embedding(_in(args, "embedding", root, pl.EMBEDDING), dataset), dataset, cfg, writer)
        else:
            assignment = read_assignment(_in(args, "assignment", root, pl.ASSIGNMENT), dataset)
            if cmd == "graph":
                pl.stage_graph(assignment, dataset, cfg, writer)
            else:
                pl.stage_surrogate(assignment, dataset, cfg, writer)
        writer.write_text(pl.CONFIG, dump_config(cfg))

    stage_name = "sweep" if cmd == "sweep" else cmd
    _run_stage(stage_name, root, body)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _dispatch(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO if isinstance(exc.error, OSError) else EXIT_STAGE
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except PhaseAnalysisError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
