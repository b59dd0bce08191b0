"""Flat key-value pipeline configuration (a TOML subset without tables)."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import embedding as emb_mod
from .dataset import SyntheticConfig, parse_branch
from .errors import ConfigError
from .phase_graph import DEFAULT_K_MAX, DEFAULT_K_MIN, DEFAULT_THRESHOLD
from .surrogate import BoostingConfig

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

CONFIG_VERSION = 1
STAGE_IDS = {"synth": 0, "embed": 1, "surrogate": 2, "holdout": 3}
DEFAULT_EPOCHS = 500  # pipeline default; the embedding module keeps 200


def derive_seed(seed: int, stage: str) -> int:
    """Stage seed split deterministically from the top-level seed."""
    ss = np.random.SeedSequence([int(seed), STAGE_IDS[stage]])
    return int(ss.generate_state(1)[0])


@dataclass(frozen=True)
class PipelineConfig:
    input: str | None = None
    schema: str | None = None
    synthetic: SyntheticConfig | None = None
    seed: int = 0
    out: str = "bundle"
    embed_k: int = emb_mod.DEFAULT_K
    embed_epochs: int = DEFAULT_EPOCHS
    embed_learning_rate: float = emb_mod.DEFAULT_LEARNING_RATE
    embed_negatives: int = emb_mod.DEFAULT_NEGATIVES
    embed_standardize: bool = False
    k_min: int = DEFAULT_K_MIN
    k_max: int = DEFAULT_K_MAX
    threshold: float = DEFAULT_THRESHOLD
    boosting: BoostingConfig = field(default_factory=BoostingConfig)
    top_rule: str = "max"
    holdout: float = 0.0
    branches: tuple[tuple[int, int, int], ...] = ()
    branch_auto: bool = True
    synth_seed: int | None = None

    def resolved_synthetic(self) -> SyntheticConfig:
        """Synthetic settings with the generator seed filled in from the top-level seed."""
        seed = self.synth_seed if self.synth_seed is not None else derive_seed(self.seed, "synth")
        return replace(self.synthetic, seed=seed)

    def validate(self, require_source: bool = True) -> "PipelineConfig":
        if require_source and (self.input is None) == (self.synthetic is None):
            raise ConfigError("exactly one of 'input' or synthetic settings must be given")
        if self.input is not None and self.schema is None:
            raise ConfigError("'schema' is required with 'input'")
        if self.embed_k < 2:
            raise ConfigError("embed_k must be >= 2")
        if self.embed_epochs < 1:
            raise ConfigError("embed_epochs must be >= 1")
        if self.embed_learning_rate <= 0:
            raise ConfigError("embed_learning_rate must be positive")
        if self.embed_negatives < 0:
            raise ConfigError("embed_negatives must be >= 0")
        if not 2 <= self.k_min <= self.k_max:
            raise ConfigError(f"need 2 <= k_min <= k_max, got k_min={self.k_min}, k_max={self.k_max}")
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.top_rule not in ("max", "quantile"):
            raise ConfigError("top_rule must be 'max' or 'quantile'")
        if not 0 <= self.holdout < 1:
            raise ConfigError("holdout must lie in [0, 1)")
        return self


_SCALARS = {
    "input": str, "schema": str, "seed": int, "out": str,
    "embed_k": int, "embed_epochs": int, "embed_learning_rate": float, "embed_negatives": int,
    "embed_standardize": bool, "k_min": int, "k_max": int, "threshold": float,
    "top_rule": str, "holdout": float, "branch_auto": bool, "synth_seed": int,
}
_BOOST = {
    "boost_rounds": ("rounds", int), "boost_learning_rate": ("learning_rate", float),
    "boost_max_leaves": ("max_leaves", int), "boost_max_bins": ("max_bins", int),
    "boost_bags": ("bags", int), "boost_bag_fraction": ("bag_fraction", float),
}
_SYNTH = {
    "synth_phases": ("n_phases", int), "synth_steps_per_phase": ("steps_per_phase", int),
    "synth_episodes": ("episodes", int), "synth_steps": ("steps", int),
    "synth_noise_sigma": ("noise_sigma", float), "synth_state_dim": ("state_dim", int),
    "synth_action_dim": ("action_dim", int), "synth_action_noise": ("action_noise", float),
}


def _coerce(key, value, kind):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key} must be a string")
    return value


def parse_branch_request(text: str) -> tuple[int, int, int]:
    parts = str(text).split(":")
    try:
        p, a, b = (int(v) for v in parts)
    except ValueError:
        raise ConfigError(f"branch request must be 'phase:succ_a:succ_b', got {text!r}") from None
    return p, a, b


def config_from_mapping(data: dict, base_dir: Path | None = None) -> PipelineConfig:
    data = dict(data)
    version = data.pop("config_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config_version {version}")
    kwargs, boost, synth = {}, {}, {}
    for key, value in data.items():
        if key in _SCALARS:
            kwargs[key] = _coerce(key, value, _SCALARS[key])
        elif key in _BOOST:
            name, kind = _BOOST[key]
            boost[name] = _coerce(key, value, kind)
        elif key in _SYNTH:
            name, kind = _SYNTH[key]
            synth[name] = _coerce(key, value, kind)
        elif key == "synth_branch":
            synth["branch"] = parse_branch(_coerce(key, value, str))
        elif key == "branches":
            if not isinstance(value, list):
                raise ConfigError("branches must be a list of 'phase:a:b' strings")
            kwargs["branches"] = tuple(parse_branch_request(v) for v in value)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if base_dir is not None:
        for key in ("input", "schema"):
            if key in kwargs and not Path(kwargs[key]).is_absolute():
                kwargs[key] = str(base_dir / kwargs[key])
    if synth:
        kwargs["synthetic"] = SyntheticConfig(**synth)
    if boost:
        kwargs["boosting"] = BoostingConfig(**boost)
    return PipelineConfig(**kwargs)


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for key, value in data.items():
        if isinstance(value, dict):
            raise ConfigError(f"config must be flat; found table {key!r}")
    return config_from_mapping(data, path.parent)


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return json.dumps(str(v))


def config_to_mapping(cfg: PipelineConfig) -> dict:
    out: dict = {"config_version": CONFIG_VERSION}
    for key in _SCALARS:
        if key == "out":  # the bundle location is not part of the analysis settings
            continue
        value = getattr(cfg, key)
        if value is not None:
            out[key] = value
    for key, (name, _) in _BOOST.items():
        out[key] = getattr(cfg.boosting, name)
    if cfg.synthetic is not None:
        s = cfg.synthetic
        for key, (name, _) in _SYNTH.items():
            value = getattr(s, name)
            if value is not None:
                out[key] = value
        if s.branch is not None:
            b = s.branch
            text = f"{b.phase}:{b.target_a}:{b.target_b}:{b.prob_a!r}"
            if b.feature is not None:
                text += f":{b.feature}:{b.gain!r}"
            out["synth_branch"] = text
    out["branches"] = [f"{p}:{a}:{b}" for p, a, b in cfg.branches]
    return out


def dump_config(cfg: PipelineConfig) -> str:
    return "".join(f"{k} = {_toml_value(v)}\n" for k, v in config_to_mapping(cfg).items())


def with_overrides(cfg: PipelineConfig, **overrides) -> PipelineConfig:
    names = {f.name for f in fields(PipelineConfig)}
    return replace(cfg, **{k: v for k, v in overrides.items() if k in names and v is not None})
