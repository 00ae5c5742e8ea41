"""Experiment configuration files (YAML).

Schema, version 1::

    schema_version: 1
    seed: 0                      # optional; --seed overrides
    model: {arch: pwc, ...}      # ModelConfig fields
    train: {...}                 # TrainPlan fields; ``mixture`` may be
                                 # {source: prob} over the built-in sources
    finetune: {...}              # TrainPlan fields for the fine-tune phase
    grid: {clip: [1.0, null], schedule: [onecycle, piecewise]}
    data: {count: 8, size: [64, 96], mixture: {...}, materialize: false}
    splits: {mode: out-of-distribution, n_train: 16, n_val: 16, size: [64, 96]}
    eval: {count: 8, size: [64, 96], mixture: {...}}
    profile: {archs: [pwc, raft], resolutions: [[64, 96], ...], repeats: 20}

Every section is optional; commands complain about the ones they need.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import yaml

from .arch import ModelConfig
from .data import SOURCES, DatasetMixture, SceneSpec
from .train import TrainPlan

SCHEMA_VERSION = 1
SECTIONS = {"schema_version", "seed", "model", "train", "finetune", "grid", "data", "splits", "eval", "profile"}


class ConfigError(ValueError):
    pass


def parse_mixture(d) -> DatasetMixture:
    """``{name: prob}`` over built-in sources, or ``{name: {prob, spec}}``."""
    if isinstance(d, DatasetMixture):
        return d
    if not isinstance(d, dict) or not d:
        raise ConfigError("mixture must be a non-empty mapping")
    names, probs, specs = [], [], []
    for name, v in d.items():
        if isinstance(v, dict):
            probs.append(float(v["prob"]))
            specs.append(SceneSpec.from_dict(v.get("spec", {})))
        else:
            if name not in SOURCES:
                raise ConfigError(f"unknown source {name!r}; built-ins are {sorted(SOURCES)}")
            probs.append(float(v))
            specs.append(SOURCES[name])
        names.append(name)
    return DatasetMixture(tuple(names), tuple(probs), tuple(specs))


def parse_plan(d, seed) -> TrainPlan:
    d = dict(d or {})
    if "mixture" in d:
        d["mixture"] = parse_mixture(d["mixture"])
    d.setdefault("seed", seed)
    return TrainPlan.from_dict(d)


@dataclass
class ExperimentConfig:
    raw: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def model(self) -> ModelConfig:
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in (self.raw.get("model") or {}).items()}
        return ModelConfig.from_dict(d)

    def plan(self, section="train") -> TrainPlan:
        if section not in self.raw:
            raise ConfigError(f"config has no {section!r} section")
        return parse_plan(self.raw[section], self.seed)

    def section(self, name, default=None):
        v = self.raw.get(name)
        if v is None:
            if default is None:
                raise ConfigError(f"config has no {name!r} section")
            return copy.deepcopy(default)
        return v

    def with_seed(self, seed):
        raw = dict(self.raw, seed=int(seed))
        return ExperimentConfig(raw, int(seed))


def load_config(path, seed=None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return from_dict(raw, seed)


def from_dict(raw, seed=None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    unknown = set(raw) - SECTIONS
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    s = int(raw.get("seed", 0) if seed is None else seed)
    cfg = ExperimentConfig(dict(raw, seed=s), s)
    try:
        cfg.model  # validate eagerly
        for sec in ("train", "finetune"):
            if sec in raw:
                cfg.plan(sec)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg
