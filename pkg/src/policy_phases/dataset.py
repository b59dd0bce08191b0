"""Trajectory corpora: schemas, CSV I/O and a synthetic phase-cycle generator."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import ndtri

from .clustering import PhaseAssignment
from .errors import ConfigError, DataError, ParseError, SchemaError

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


def _readonly(a, dtype=np.float64):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered, named state and action features."""

    state_names: tuple[str, ...]
    action_names: tuple[str, ...]
    state_units: tuple[str, ...] | None = None
    action_units: tuple[str, ...] | None = None

    def __post_init__(self):
        for attr in ("state_names", "action_names", "state_units", "action_units"):
            value = getattr(self, attr)
            if value is not None:
                object.__setattr__(self, attr, tuple(str(v) for v in value))
        for kind, names in (("state", self.state_names), ("action", self.action_names)):
            if len(names) < 1:
                raise SchemaError(f"schema needs at least one {kind} feature")
            if len(set(names)) != len(names):
                raise SchemaError(f"duplicate {kind} names in schema")
        if self.state_units is not None and len(self.state_units) != len(self.state_names):
            raise SchemaError("state_units length differs from state_names")
        if self.action_units is not None and len(self.action_units) != len(self.action_names):
            raise SchemaError("action_units length differs from action_names")

    @property
    def n_states(self) -> int:
        return len(self.state_names)

    @property
    def n_actions(self) -> int:
        return len(self.action_names)

    @classmethod
    def generic(cls, n_states: int, n_actions: int) -> "FeatureSchema":
        return cls(
            tuple(f"x{i}" for i in range(n_states)),
            tuple(f"u{i}" for i in range(n_actions)),
        )

    def header(self) -> list[str]:
        return (
            ["episode", "step"]
            + [f"s_{n}" for n in self.state_names]
            + [f"a_{n}" for n in self.action_names]
        )


# 17-D observation and 6-D torque action of HalfCheetah-v5.
HALFCHEETAH_SCHEMA = FeatureSchema(
    state_names=(
        "Root Z", "Root Ang", "B-Thigh", "B-Shin", "B-Foot", "F-Thigh", "F-Shin", "F-Foot",
        "Vel Root X", "Vel Root Z", "Vel Root Ang", "Vel B-Thigh", "Vel B-Shin",
        "Vel B-Foot", "Vel F-Thigh", "Vel F-Shin", "Vel F-Foot",
    ),
    action_names=("B-Thigh", "B-Shin", "B-Foot", "F-Thigh", "F-Shin", "F-Foot"),
    state_units=("m",) + ("rad",) * 7 + ("m/s", "m/s") + ("rad/s",) * 7,
    action_units=("torque",) * 6,
)


@dataclass(frozen=True, eq=False)
class Episode:
    episode_id: int
    states: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        states = _readonly(self.states)
        actions = _readonly(self.actions)
        if states.ndim != 2 or actions.ndim != 2:
            raise DataError(f"episode {self.episode_id}: states/actions must be 2-D")
        if states.shape[0] != actions.shape[0]:
            raise DataError(f"episode {self.episode_id}: {states.shape[0]} states vs {actions.shape[0]} actions")
        if states.shape[0] < 2:
            raise DataError(f"episode {self.episode_id}: needs at least 2 steps")
        object.__setattr__(self, "episode_id", int(self.episode_id))
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)

    def __len__(self):
        return self.states.shape[0]


@dataclass(frozen=True, eq=False)
class TrajectoryDataset:
    """Episodes of aligned state/action vectors; rows are ordered by (episode, step)."""

    episodes: tuple[Episode, ...]
    schema: FeatureSchema

    def __post_init__(self):
        episodes = tuple(self.episodes)
        if not episodes:
            raise DataError("dataset has no episodes")
        ids = [ep.episode_id for ep in episodes]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate episode ids")
        for ep in episodes:
            if ep.states.shape[1] != self.schema.n_states:
                raise SchemaError(
                    f"episode {ep.episode_id}: state dim {ep.states.shape[1]} != schema {self.schema.n_states}"
                )
            if ep.actions.shape[1] != self.schema.n_actions:
                raise SchemaError(
                    f"episode {ep.episode_id}: action dim {ep.actions.shape[1]} != schema {self.schema.n_actions}"
                )
            if not (np.isfinite(ep.states).all() and np.isfinite(ep.actions).all()):
                raise DataError(f"episode {ep.episode_id}: non-finite value")
        object.__setattr__(self, "episodes", episodes)

    @cached_property
    def states(self) -> np.ndarray:
        return _readonly(np.concatenate([ep.states for ep in self.episodes]))

    @cached_property
    def actions(self) -> np.ndarray:
        return _readonly(np.concatenate([ep.actions for ep in self.episodes]))

    @cached_property
    def episode_lengths(self) -> np.ndarray:
        return _readonly([len(ep) for ep in self.episodes], dtype=np.int64)

    @cached_property
    def episode_index(self) -> np.ndarray:
        """Episode id of every row."""
        return _readonly(
            np.repeat([ep.episode_id for ep in self.episodes], self.episode_lengths), dtype=np.int64
        )

    @cached_property
    def step_index(self) -> np.ndarray:
        return _readonly(np.concatenate([np.arange(n) for n in self.episode_lengths]), dtype=np.int64)

    @cached_property
    def episode_offsets(self) -> np.ndarray:
        """Row offset of each episode start, plus the total as the last entry."""
        return _readonly(np.concatenate([[0], np.cumsum(self.episode_lengths)]), dtype=np.int64)

    @property
    def n_states(self) -> int:
        return int(self.episode_lengths.sum())

    @property
    def n_transitions(self) -> int:
        return int((self.episode_lengths - 1).sum())

    def standardized(self) -> "TrajectoryDataset":
        """Copy with every state feature shifted/scaled to zero mean and unit variance.

        Constant features are only centered.
        """
        mu = self.states.mean(axis=0)
        sd = self.states.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        return TrajectoryDataset(
            tuple(Episode(ep.episode_id, (ep.states - mu) / sd, ep.actions) for ep in self.episodes),
            self.schema,
        )

    def equals(self, other: "TrajectoryDataset") -> bool:
        return (
            self.schema == other.schema
            and [ep.episode_id for ep in self.episodes] == [ep.episode_id for ep in other.episodes]
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.episode_lengths, other.episode_lengths)
        )


# -- file formats -------------------------------------------------------------


def format_float(x: float) -> str:
    # shortest repr that round-trips exactly (never fewer digits than needed)
    return repr(float(x))


def write_trajectories(dataset: TrajectoryDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(dataset.schema.header())
        for ep in dataset.episodes:
            for t in range(len(ep)):
                writer.writerow(
                    [ep.episode_id, t]
                    + [format_float(v) for v in ep.states[t]]
                    + [format_float(v) for v in ep.actions[t]]
                )


def _parse_int(token, line, what):
    try:
        return int(token)
    except ValueError:
        raise ParseError(f"{what} {token!r} is not an integer", line) from None


def load_trajectories(path, schema: FeatureSchema) -> TrajectoryDataset:
    """Read a long-form trajectory CSV and validate it against ``schema``."""
    path = Path(path)
    ds, da = schema.n_states, schema.n_actions
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", 1) from None
        header = [h.strip() for h in header]
        if header[:2] != ["episode", "step"]:
            raise ParseError("header must start with 'episode,step'", 1)
        n_s = sum(h.startswith("s_") for h in header[2:])
        n_a = sum(h.startswith("a_") for h in header[2:])
        if n_s != ds or n_a != da or len(header) != 2 + ds + da:
            raise SchemaError(
                f"file has {n_s} state / {n_a} action columns, schema expects {ds} / {da}"
            )
        if header != schema.header():
            raise SchemaError("column names do not match the schema")

        episodes: list[Episode] = []
        cur_id, cur_rows = None, []
        seen: set[int] = set()

        def flush():
            if cur_id is None:
                return
            block = np.asarray(cur_rows, dtype=np.float64)
            episodes.append(Episode(cur_id, block[:, :ds], block[:, ds:]))

        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2 + ds + da:
                raise ParseError(f"expected {2 + ds + da} fields, got {len(row)}", line)
            ep_id = _parse_int(row[0], line, "episode")
            step = _parse_int(row[1], line, "step")
            try:
                values = [float(v) for v in row[2:]]
            except ValueError:
                raise ParseError("non-numeric value", line) from None
            if not all(math.isfinite(v) for v in values):
                raise DataError(f"line {line}: non-finite value")
            if ep_id != cur_id:
                if ep_id in seen:
                    raise DataError(f"line {line}: episode {ep_id} rows are not contiguous")
                flush()
                seen.add(ep_id)
                cur_id, cur_rows = ep_id, []
                expected = 0
            else:
                expected = len(cur_rows)
            if step != expected:
                raise DataError(f"line {line}: non-consecutive steps in episode {ep_id} (got {step}, expected {expected})")
            cur_rows.append(values)
        flush()
    if not episodes:
        raise ParseError("no data rows", 2)
    return TrajectoryDataset(tuple(episodes), schema)


def write_schema(schema: FeatureSchema, path) -> None:
    lines = [
        "state_names = " + json.dumps(list(schema.state_names)),
        "action_names = " + json.dumps(list(schema.action_names)),
    ]
    if schema.state_units is not None:
        lines.append("state_units = " + json.dumps(list(schema.state_units)))
    if schema.action_units is not None:
        lines.append("action_units = " + json.dumps(list(schema.action_units)))
    Path(path).write_text("\n".join(lines) + "\n")


def load_schema(path) -> FeatureSchema:
    try:
        data = tomllib.loads(Path(path).read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"schema file: {exc}") from None
    try:
        return FeatureSchema(
            tuple(data["state_names"]),
            tuple(data["action_names"]),
            tuple(data["state_units"]) if "state_units" in data else None,
            tuple(data["action_units"]) if "action_units" in data else None,
        )
    except KeyError as exc:
        raise SchemaError(f"schema file is missing {exc.args[0]!r}") from None


# -- synthetic generator -----------------------------------------------------


@dataclass(frozen=True)
class BranchSpec:
    """Leaving ``phase`` goes to ``target_a`` with probability ``prob_a``, else ``target_b``.

    When ``feature`` is set the exit is decided by that state feature instead of a coin:
    the run exits to ``target_a`` when the feature's deviation from the phase anchor at
    the run's last step lies above the ``1 - prob_a`` normal quantile. Runs exiting to
    ``target_b`` then also use an action rule whose column for ``feature`` is ``gain``.
    """

    phase: int
    target_a: int
    target_b: int
    prob_a: float = 0.5
    feature: int | None = None
    gain: float = 1.5


@dataclass(frozen=True)
class SyntheticConfig:
    n_phases: int = 4
    steps_per_phase: int = 1
    episodes: int = 5
    steps: int = 1000
    noise_sigma: float = 0.05
    branch: BranchSpec | None = None
    seed: int = 0
    state_dim: int | None = None
    action_dim: int = 3
    action_noise: float = 0.01

    def __post_init__(self):
        P = self.n_phases
        if P < 2:
            raise ConfigError("n_phases must be >= 2")
        if self.steps_per_phase < 1 or self.episodes < 1 or self.steps < 2:
            raise ConfigError("steps_per_phase >= 1, episodes >= 1 and steps >= 2 are required")
        if not self.noise_sigma >= 0 or not self.action_noise >= 0:
            raise ConfigError("noise levels must be nonnegative")
        if self.action_dim < 1:
            raise ConfigError("action_dim must be >= 1")
        if self.dim < P - 1:
            raise ConfigError(f"state_dim must be >= n_phases - 1 = {P - 1}")
        b = self.branch
        if b is not None:
            if not 0 <= b.prob_a <= 1:
                raise ConfigError("branch prob_a must lie in [0, 1]")
            for v in (b.phase, b.target_a, b.target_b):
                if not 0 <= v < P:
                    raise ConfigError(f"branch phase index {v} out of range")
            if b.feature is not None and not 0 <= b.feature < self.dim:
                raise ConfigError("branch feature out of range")

    @property
    def dim(self) -> int:
        return self.n_phases if self.state_dim is None else self.state_dim


@dataclass(frozen=True, eq=False)
class SyntheticTruth:
    """Generator internals useful as test oracles."""

    anchors: np.ndarray
    action_matrices: np.ndarray  # (P, D_a, D_s)
    branch_matrix: np.ndarray | None = None
    exits: dict = field(default_factory=dict)


def simplex_anchors(n_phases: int, dim: int) -> np.ndarray:
    """Vertices of a regular simplex with unit norm, embedded in ``dim`` dimensions."""
    P = n_phases
    v = np.eye(P) - 1.0 / P
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    if dim >= P:
        out = np.zeros((P, dim))
        out[:, :P] = v
        return out
    # dim == P - 1: express in an orthonormal basis of the centered subspace
    q, _ = np.linalg.qr(v.T)
    coords = v @ q[:, : P - 1]
    return coords


def _action_matrices(rng, P, da, ds):
    mats = rng.uniform(-0.25, 0.25, size=(P, da, ds))
    dominant = rng.integers(0, ds, size=P)
    signs = rng.choice([-1.0, 1.0], size=(P, da))
    for p in range(P):
        mats[p, :, dominant[p]] = signs[p]
    return mats


def generate_synthetic(config: SyntheticConfig, *, return_truth: bool = False):
    """Sample a quasi-periodic dataset and its ground-truth phase labels.

    Phase ``p`` owns anchor ``p`` of a unit-norm regular simplex; each state is its
    phase anchor plus isotropic Gaussian noise. Phases advance cyclically every
    ``steps_per_phase`` steps, except that leaving the branch phase (if any) jumps to
    one of two targets, after which the cycle resumes from the target. Actions are
    ``M_p @ s + noise`` with a fixed matrix per phase.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    P, ds, da, L = cfg.n_phases, cfg.dim, cfg.action_dim, cfg.steps_per_phase
    anchors = simplex_anchors(P, ds)
    mats = _action_matrices(rng, P, da, ds)
    b = cfg.branch
    branch_mat = None
    threshold = 0.0
    if b is not None and b.feature is not None:
        branch_mat = mats[b.phase].copy()
        branch_mat[:, b.feature] = b.gain
        threshold = cfg.noise_sigma * float(ndtri(1.0 - b.prob_a)) if 0 < b.prob_a < 1 else (
            -np.inf if b.prob_a == 1 else np.inf
        )

    episodes, labels = [], []
    exits: dict[tuple[int, int], int] = {}
    for e in range(cfg.episodes):
        T = cfg.steps
        noise = rng.normal(0.0, 1.0, size=(T, ds)) * cfg.noise_sigma
        act_noise = rng.normal(0.0, 1.0, size=(T, da)) * cfg.action_noise
        coins = rng.random(T)
        phase = np.empty(T, dtype=np.int64)
        use_b = np.zeros(T, dtype=bool)
        p, run_start = 0, 0
        for t in range(T):
            phase[t] = p
            if t - run_start + 1 < L:
                continue
            # run of phase p ends at step t
            if b is not None and p == b.phase:
                if b.feature is not None:
                    go_a = noise[t, b.feature] > threshold
                else:
                    go_a = coins[t] < b.prob_a
                nxt = b.target_a if go_a else b.target_b
                if branch_mat is not None and not go_a:
                    use_b[run_start : t + 1] = True
                exits[(e, run_start)] = nxt
            else:
                nxt = (p + 1) % P
            p, run_start = nxt, t + 1
        states = anchors[phase] + noise
        actions = np.einsum("tij,tj->ti", mats[phase], states)
        if branch_mat is not None and use_b.any():
            actions[use_b] = states[use_b] @ branch_mat.T
        actions += act_noise
        episodes.append(Episode(e, states, actions))
        labels.append(phase)

    dataset = TrajectoryDataset(tuple(episodes), FeatureSchema.generic(ds, da))
    all_labels = np.concatenate(labels)
    if len(np.unique(all_labels)) != P:
        raise ConfigError("synthetic run too short to visit every phase")
    assignment = PhaseAssignment(all_labels, P)
    if return_truth:
        return dataset, assignment, SyntheticTruth(anchors, mats, branch_mat, exits)
    return dataset, assignment


def parse_branch(text: str) -> BranchSpec:
    """Parse ``phase:target_a:target_b:prob_a[:feature[:gain]]``."""
    parts = str(text).split(":")
    if not 4 <= len(parts) <= 6:
        raise ConfigError(f"bad branch spec {text!r}")
    try:
        return BranchSpec(
            int(parts[0]), int(parts[1]), int(parts[2]), float(parts[3]),
            int(parts[4]) if len(parts) > 4 and parts[4] != "" else None,
            float(parts[5]) if len(parts) > 5 else 1.5,
        )
    except ValueError:
        raise ConfigError(f"bad branch spec {text!r}") from None


def labels_by_episode(dataset: TrajectoryDataset, labels: Sequence[int]) -> list[np.ndarray]:
    labels = np.asarray(labels)
    off = dataset.episode_offsets
    return [labels[off[i] : off[i + 1]] for i in range(len(dataset.episodes))]
