"""Declarative run configuration: one YAML tree, validated up front.

Every command shares the same RunConfig; its canonical-JSON hash is the run
fingerprint stamped into every artifact, and chained commands refuse inputs
whose fingerprint differs from the active config.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError

_STAGES = ("meta_learner", "meta_agg", "sampler", "joint")


@dataclass
class RunConfig:
    dataset_path: str = ""
    dataset_format: str = "tsv-triples"
    side: str = "user"
    threshold: int = 20
    dim: int = 256
    k: int = 3
    depth: int = 3
    aggregator: str = "mean"
    activation: str = "sigmoid"
    heads: int = 4
    f_max: int = 8
    m_trajectories: int = 3
    lam_blend: float = 0.05
    use_baseline: bool = False
    seed: int = 0
    train_ratio: float = 0.7
    chrono_frac: float = 0.1
    metric_k: int = 20
    batch_size: int = 64
    workers: int = 1
    out_dir: str = "out"
    gt_epochs: int = 50
    gt_lr: float = 0.005
    gt_reg: float = 1e-5
    finetune_epochs: int = 10
    finetune_lr: float = 0.003
    tune_sampler: bool = True
    sweep_depths: list = field(default_factory=lambda: [1, 2, 3, 4])
    stage_epochs: dict = field(default_factory=lambda: {
        "meta_learner": 50, "meta_agg": 50, "sampler": 50, "joint": 30})
    stage_lrs: dict = field(default_factory=lambda: {
        "meta_learner": 0.005, "meta_agg": 0.003, "sampler": 0.003, "joint": 0.001})


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _violations(cfg: RunConfig) -> list:
    v = []
    if not cfg.dataset_path:
        v.append("dataset_path is required")
    if cfg.dataset_format not in ("tsv-triples", "movielens-ratings"):
        v.append(f"dataset_format unknown: {cfg.dataset_format}")
    if cfg.side not in ("user", "item"):
        v.append(f"side must be user|item, got {cfg.side}")
    if cfg.threshold < 0:
        v.append(f"threshold must be >= 0, got {cfg.threshold}")
    if cfg.dim < 1:
        v.append(f"dim must be >= 1, got {cfg.dim}")
    if cfg.k < 1:
        v.append(f"k must be >= 1, got {cfg.k}")
    if cfg.depth < 1:
        v.append(f"depth must be >= 1, got {cfg.depth}")
    if cfg.aggregator not in ("mean", "attention", "lightgcn"):
        v.append(f"aggregator unknown: {cfg.aggregator}")
    if cfg.activation not in ("sigmoid", "relu", "tanh"):
        v.append(f"activation unknown: {cfg.activation}")
    if cfg.heads < 1 or cfg.dim % max(cfg.heads, 1) != 0:
        v.append(f"heads must divide dim ({cfg.heads} vs {cfg.dim})")
    if cfg.f_max < 0:
        v.append(f"f_max must be >= 0, got {cfg.f_max}")
    if cfg.m_trajectories < 1:
        v.append(f"m_trajectories must be >= 1, got {cfg.m_trajectories}")
    if not (0.0 < cfg.lam_blend < 1.0):
        v.append(f"lam_blend must lie in (0, 1), got {cfg.lam_blend}")
    if not (0.0 < cfg.train_ratio < 1.0):
        v.append(f"train_ratio must lie in (0, 1), got {cfg.train_ratio}")
    if not (0.0 < cfg.chrono_frac < 1.0):
        v.append(f"chrono_frac must lie in (0, 1), got {cfg.chrono_frac}")
    if cfg.metric_k < 1:
        v.append(f"metric_k must be >= 1, got {cfg.metric_k}")
    if cfg.batch_size < 1:
        v.append(f"batch_size must be >= 1, got {cfg.batch_size}")
    if cfg.workers < 1:
        v.append(f"workers must be >= 1, got {cfg.workers}")
    if cfg.gt_epochs < 1 or cfg.finetune_epochs < 0:
        v.append("gt_epochs must be >= 1 and finetune_epochs >= 0")
    if cfg.gt_lr <= 0 or cfg.finetune_lr < 0:
        v.append("learning rates must be positive (finetune_lr may be 0)")
    if not cfg.sweep_depths or any(not isinstance(d, int) or d < 1
                                   for d in cfg.sweep_depths):
        v.append(f"sweep_depths must be positive ints, got {cfg.sweep_depths}")
    for name, d in (("stage_epochs", cfg.stage_epochs), ("stage_lrs", cfg.stage_lrs)):
        unknown = sorted(set(d) - set(_STAGES))
        missing = [s for s in _STAGES if s not in d]
        if unknown:
            v.append(f"{name} has unknown stages: {unknown}")
        if missing:
            v.append(f"{name} missing stages: {missing}")
        bad = {k: val for k, val in d.items()
               if k in _STAGES and (not isinstance(val, (int, float)) or val < 0)}
        if bad:
            v.append(f"{name} values must be non-negative numbers: {bad}")
    if all(isinstance(e, (int, float)) for e in cfg.stage_epochs.values()):
        cfg.stage_epochs = {k: int(val) for k, val in cfg.stage_epochs.items()}
    return v


def make_config(tree: dict) -> RunConfig:
    """Build and validate a config from a plain dict, reporting every violation."""
    violations = []
    unknown = sorted(set(tree) - set(_FIELDS))
    if unknown:
        violations.append(f"unknown config keys: {unknown}")
    cfg = RunConfig(**{k: v for k, v in tree.items() if k in _FIELDS})
    violations.extend(_violations(cfg))
    if violations:
        raise ConfigError(violations)
    return cfg


def _parse_override(item: str) -> tuple:
    if "=" not in item:
        raise ConfigError([f"override '{item}' is not key=value"])
    key, raw = item.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def load_config(path: str | None, overrides=()) -> RunConfig:
    """Load the YAML tree, apply dotted-path overrides, validate."""
    tree: dict = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                loaded = yaml.safe_load(fh) or {}
        except OSError as e:
            raise ConfigError([f"cannot read config file: {e}"]) from None
        except yaml.YAMLError as e:
            raise ConfigError([f"config file is not valid YAML: {e}"]) from None
        if not isinstance(loaded, dict):
            raise ConfigError(["config file must hold a mapping at top level"])
        tree = loaded
    for item in overrides:
        key, value = _parse_override(item)
        parts = key.split(".")
        node = tree
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError([f"override path '{key}' crosses a non-mapping"])
        node[parts[-1]] = value
    return make_config(tree)


def canonical_json(cfg: RunConfig) -> str:
    return json.dumps(dataclasses.asdict(cfg), sort_keys=True, separators=(",", ":"))


def fingerprint(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()[:16]


def effective_yaml(cfg: RunConfig) -> str:
    return yaml.safe_dump(dataclasses.asdict(cfg), sort_keys=True)
