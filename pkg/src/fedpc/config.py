"""Experiment files: YAML in, validated RunConfigs out.

An experiment file looks like::

    output_dir: runs
    seeds: [0, 1, 2]
    federation:            # or: federation: {path: features.csv}
      num_vehicles: 3
      drivers_per_vehicle: 4
    defaults:              # shared by every run, all optional
      rounds: 5
      batch_size: 32
    runs:
      fedpc: {algorithm: fedpc}
      fedavg: {algorithm: fedavg, mu: 0}

Run fields are flat scalars (plus the ``hidden`` list), so any of them can
be overridden from the command line.  Unless the federation block pins its
own ``seed``, the federation is regenerated from each run seed.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import yaml

from .algorithms import ALGORITHMS, RunConfig
from .data import FederationConfig
from .errors import ConfigError
from .numerics import LearningSchedule, LossConfig, ModelSpec

RUN_FIELDS: dict[str, type] = {
    "algorithm": str,
    "rounds": int,
    "local_epochs": int,
    "batch_size": int,
    "mu": float,
    "weight_decay": float,
    "lr": float,
    "lr_decay": float,
    "hidden": list,
    "frozen_layers": int,
    "activation": str,
    "personalization_steps": int,
    "personalization_lr": float,
    "pretrain": bool,
    "metric_ii_mode": str,
}

# Reference hyperparameters; batch 128 is the full-scale value.
RUN_DEFAULTS: dict[str, Any] = {
    "algorithm": "fedpc",
    "rounds": 5,
    "local_epochs": 5,
    "batch_size": 128,
    "mu": 1.0,
    "weight_decay": 1e-5,
    "lr": 1e-4,
    "lr_decay": 0.5,
    "hidden": [64, 64],
    "frozen_layers": 1,
    "activation": "relu",
    "personalization_steps": 5,
    "personalization_lr": 1e-3,
    "pretrain": True,
    "metric_ii_mode": "all_pairs",
}

FEDERATION_FIELDS: dict[str, type] = {f.name: f.type for f in fields(FederationConfig)}
_FED_TYPES = {name: (float if "float" in str(t) else int) for name, t in FEDERATION_FIELDS.items()}


class _UniqueKeyLoader(yaml.SafeLoader):
    pass


def _mapping_no_dupes(loader, node, deep=False):
    seen = set()
    for key_node, _ in node.value:
        key = loader.construct_object(key_node, deep=deep)
        if key in seen:
            raise ConfigError(f"line {key_node.start_mark.line + 1}: duplicate key {key!r}")
        seen.add(key)
    return loader.construct_mapping(node, deep)


_UniqueKeyLoader.add_constructor(
    yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _mapping_no_dupes
)


class ConfigErrors(ConfigError):
    """Several field-level problems found at once."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


@dataclass
class NamedRun:
    name: str
    seed: int
    config: RunConfig


@dataclass
class Experiment:
    output_dir: Path
    runs: list[NamedRun]


def _coerce(value, kind: type, where: str, problems: list[str]):
    if kind is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
    elif kind is int:
        if isinstance(value, bool):
            pass
        elif isinstance(value, int):
            return value
        elif isinstance(value, float) and value.is_integer():
            return int(value)
        elif isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
    elif kind is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
    elif kind is str:
        if isinstance(value, str):
            return value
    elif kind is list:
        if isinstance(value, str):
            value = [v for v in value.replace("[", "").replace("]", "").split(",") if v.strip()]
        if isinstance(value, (list, tuple)):
            try:
                return [int(v) for v in value]
            except (TypeError, ValueError):
                pass
    problems.append(f"{where}: expected {kind.__name__}, got {value!r}")
    return None


def parse_override(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not KEY=VALUE")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def load_experiment_dict(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        raw = yaml.load(text, Loader=_UniqueKeyLoader)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return raw


def resolve_experiment(
    raw: dict,
    overrides: dict[str, Any] | None = None,
    seeds: list[int] | None = None,
    output_dir: str | Path | None = None,
) -> Experiment:
    """Validate everything up front; raise ConfigErrors listing every problem."""
    problems: list[str] = []
    overrides = dict(overrides or {})
    known_top = {"output_dir", "seeds", "seed", "federation", "defaults", "runs"}
    for key in raw:
        if key not in known_top:
            problems.append(f"{key}: unknown top-level key")

    fed_raw = raw.get("federation") or {}
    if not isinstance(fed_raw, dict):
        problems.append("federation: must be a mapping")
        fed_raw = {}
    fed_raw = dict(fed_raw)
    for key in [k for k in overrides if k.startswith("federation.")]:
        fed_raw[key.split(".", 1)[1]] = overrides.pop(key)

    fed_path = fed_raw.pop("path", None)
    fed_values: dict[str, Any] = {}
    for key, value in fed_raw.items():
        if key not in _FED_TYPES:
            problems.append(f"federation.{key}: unknown field")
            continue
        fed_values[key] = _coerce(value, _FED_TYPES[key], f"federation.{key}", problems)
    if fed_path is not None and fed_values:
        problems.append("federation: give either path or generator fields, not both")

    defaults = raw.get("defaults") or {}
    runs_raw = raw.get("runs")
    if runs_raw is None:
        runs_raw = {"default": {}}
    if not isinstance(runs_raw, dict) or not runs_raw:
        problems.append("runs: must be a non-empty mapping of name -> run fields")
        runs_raw = {}

    if seeds is None:
        seeds_raw = raw.get("seeds", [raw.get("seed", 0)])
        if not isinstance(seeds_raw, list):
            seeds_raw = [seeds_raw]
        seeds = [_coerce(s, int, "seeds", problems) for s in seeds_raw]
    if not seeds:
        problems.append("seeds: at least one seed is required")
    for s in seeds:
        if isinstance(s, int) and s < 0:
            problems.append(f"seeds: {s} is negative")

    for key in overrides:
        if key not in RUN_FIELDS:
            problems.append(f"override {key}: unknown field")

    runs: list[NamedRun] = []
    for name, body in runs_raw.items():
        body = body or {}
        if not isinstance(body, dict):
            problems.append(f"runs.{name}: must be a mapping")
            continue
        merged = dict(RUN_DEFAULTS)
        for source, label in ((defaults, "defaults"), (body, f"runs.{name}"), (overrides, "override")):
            for key, value in source.items():
                if key not in RUN_FIELDS:
                    if label != "override":
                        problems.append(f"{label}.{key}: unknown field")
                    continue
                merged[key] = _coerce(value, RUN_FIELDS[key], f"{label}.{key}", problems)
        if any(v is None for v in merged.values()) or any(v is None for v in fed_values.values()):
            continue
        for seed in seeds:
            if not isinstance(seed, int):
                continue
            try:
                cfg = build_run_config(merged, fed_values, fed_path, seed)
            except ConfigError as exc:
                problems.append(f"runs.{name}: {exc}")
                break
            except TypeError as exc:
                problems.append(f"runs.{name}: {exc}")
                break
            runs.append(NamedRun(str(name), seed, cfg))

    if problems:
        raise ConfigErrors(problems)
    out = Path(output_dir if output_dir is not None else raw.get("output_dir", "runs"))
    return Experiment(out, runs)


def build_run_config(run: dict, fed_values: dict, fed_path: str | None, seed: int) -> RunConfig:
    if run["algorithm"] not in ALGORITHMS:
        raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {run['algorithm']!r}")
    if fed_path is not None:
        federation: FederationConfig | str = str(fed_path)
        from .data import ingest_feature_table

        tables = ingest_feature_table(fed_path)
        dim = tables[0].train_features.shape[1]
        classes = 1 + max(
            int(max(t.train_labels.max(initial=0), t.test_labels.max(initial=0))) for t in tables
        )
    else:
        values = {"seed": seed, **fed_values}
        federation = FederationConfig(**values)
        dim, classes = federation.feature_dim, federation.classes
    rounds = 1 if run["algorithm"] == "line" else run["rounds"]
    model = ModelSpec((dim, *run["hidden"], classes), run["frozen_layers"], run["activation"])
    return RunConfig(
        algorithm=run["algorithm"],
        rounds=rounds,
        local_epochs=run["local_epochs"],
        batch_size=run["batch_size"],
        loss=LossConfig(run["mu"], run["weight_decay"]),
        lr=LearningSchedule(run["lr"], run["lr_decay"]),
        model=model,
        federation=federation,
        seed=seed,
        personalization_steps=run["personalization_steps"],
        personalization_lr=run["personalization_lr"],
        pretrain=run["pretrain"],
        metric_ii_mode=run["metric_ii_mode"],
    )


def run_config_to_dict(cfg: RunConfig) -> dict:
    if isinstance(cfg.federation, FederationConfig):
        fed = {f.name: getattr(cfg.federation, f.name) for f in fields(FederationConfig)}
    else:
        fed = {"path": cfg.federation}
    return {
        "algorithm": cfg.algorithm,
        "rounds": cfg.rounds,
        "local_epochs": cfg.local_epochs,
        "batch_size": cfg.batch_size,
        "mu": cfg.loss.mu,
        "weight_decay": cfg.loss.weight_decay,
        "lr": cfg.lr.eta0,
        "lr_decay": cfg.lr.decay,
        "model": cfg.model.to_dict(),
        "federation": fed,
        "seed": cfg.seed,
        "personalization_steps": cfg.personalization_steps,
        "personalization_lr": cfg.personalization_lr,
        "pretrain": cfg.pretrain,
        "metric_ii_mode": cfg.metric_ii_mode,
    }


def run_config_from_dict(d: dict) -> RunConfig:
    fed = d["federation"]
    federation = fed["path"] if "path" in fed else FederationConfig(**fed)
    m = d["model"]
    return RunConfig(
        algorithm=d["algorithm"],
        rounds=d["rounds"],
        local_epochs=d["local_epochs"],
        batch_size=d["batch_size"],
        loss=LossConfig(d["mu"], d["weight_decay"]),
        lr=LearningSchedule(d["lr"], d["lr_decay"]),
        model=ModelSpec(tuple(m["layer_sizes"]), m["frozen_layers"], m["activation"]),
        federation=federation,
        seed=d["seed"],
        personalization_steps=d["personalization_steps"],
        personalization_lr=d["personalization_lr"],
        pretrain=d["pretrain"],
        metric_ii_mode=d["metric_ii_mode"],
    )


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg_dict: dict) -> str:
    return hashlib.sha256(canonical_json(cfg_dict).encode()).hexdigest()
