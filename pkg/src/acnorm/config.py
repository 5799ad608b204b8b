"""Versioned experiment configuration (YAML or JSON) and the ``ACNORM_SEED`` override."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .data import SyntheticTaskSpec
from .errors import ConfigError
from .model import ArchSpec
from .training import TrainConfig
from .variants import NormKind

SCHEMA_VERSION = 1
SEED_ENV = "ACNORM_SEED"
VARIANTS = ("original", "shuffled", "masked", "scratch")
ZOO_ORIGINS = ("target", "source", "random")


def _build(cls, section, where):
    section = dict(section or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(section) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class Arm:
    """A fine-tuning arm: a name plus overrides of the ``finetune`` section."""

    name: str
    overrides: dict = field(default_factory=dict)

    @classmethod
    def parse(cls, value):
        if isinstance(value, str):
            NormKind.parse(value)
            return cls(value, {"norm_kind": value})
        if isinstance(value, dict):
            value = dict(value)
            name = value.pop("name", None) or value.get("norm_kind")
            if not name:
                raise ConfigError(f"arm needs a name or norm_kind: {value}")
            return cls(str(name), value)
        raise ConfigError(f"cannot parse arm {value!r}")

    def train_config(self, base: TrainConfig, seed) -> TrainConfig:
        allowed = {f.name for f in fields(TrainConfig)}
        unknown = sorted(set(self.overrides) - allowed)
        if unknown:
            raise ConfigError(f"arm {self.name}: unknown keys {unknown}")
        return replace(base, **self.overrides, seed=seed)


@dataclass
class ZooMember:
    name: str
    origin: str = "target"
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.origin not in ZOO_ORIGINS:
            raise ConfigError(f"zoo member {self.name}: origin must be one of {ZOO_ORIGINS}")


@dataclass
class ZooConfig:
    members: list
    truth_arm: str = "vanilla_bn"
    metric: str = "dice"


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    n_seeds: int = 1
    arch: ArchSpec = field(default_factory=ArchSpec)
    source: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    target: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = field(default_factory=TrainConfig)
    arms: list = field(default_factory=lambda: [Arm.parse("vanilla_bn"), Arm.parse("acnorm")])
    variants: list = field(default_factory=lambda: ["original"])
    mask_ratio: float = 0.5
    estimate: bool = False
    probe_layer: str | None = None
    zoo: ZooConfig | None = None
    plots: bool = True
    workers: int = 1
    eq5: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1")
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ConfigError(f"unknown checkpoint variants {bad}; expected a subset of {VARIANTS}")
        names = [a.name for a in self.arms]
        if len(set(names)) != len(names):
            raise ConfigError(f"arm names must be unique, got {names}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError("mask_ratio must lie in [0, 1]")
        if self.source.task != self.arch.task or self.target.task != self.arch.task:
            raise ConfigError("source, target and arch must share the same task")

    @property
    def seeds(self):
        return [self.seed + i for i in range(self.n_seeds)]

    def arm(self, name) -> Arm:
        for a in self.arms:
            if a.name == name:
                return a
        return Arm.parse(name)

    def to_dict(self):
        doc = {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "seed": self.seed,
            "n_seeds": self.n_seeds,
            "arch": asdict(self.arch),
            "source": asdict(self.source),
            "target": asdict(self.target),
            "pretrain": self.pretrain.to_dict(),
            "finetune": self.finetune.to_dict(),
            "arms": [{"name": a.name, **a.overrides} for a in self.arms],
            "variants": list(self.variants),
            "mask_ratio": self.mask_ratio,
            "estimate": self.estimate,
            "probe_layer": self.probe_layer,
            "zoo": asdict(self.zoo) if self.zoo else None,
            "plots": self.plots,
            "workers": self.workers,
            "eq5": dict(self.eq5),
        }
        for key in ("source", "target"):
            doc[key]["image_size"] = list(doc[key]["image_size"])
        return doc


_TOP_LEVEL = {f.name for f in fields(ExperimentConfig)} | {"schema_version", "norm"}
_NORM_KEYS = {"kind": "norm_kind", "temperature": "temperature", "eps": "eps",
              "momentum": "momentum", "detach_calibration": "detach_calibration"}


def config_from_dict(doc, env=None) -> ExperimentConfig:
    """Validate a config mapping; ``env`` (default ``os.environ``) may override the seed."""
    if "config" in doc and "schema_version" not in doc:
        doc = doc["config"]  # a run manifest
    doc = dict(doc)
    version = doc.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    unknown = sorted(set(doc) - _TOP_LEVEL)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")

    kwargs = {k: v for k, v in doc.items()
              if k in ("name", "seed", "n_seeds", "variants", "mask_ratio", "estimate",
                       "probe_layer", "plots", "workers", "eq5") and v is not None}
    kwargs["arch"] = _build(ArchSpec, doc.get("arch"), "arch")
    kwargs["source"] = _build(SyntheticTaskSpec, doc.get("source"), "source")
    kwargs["target"] = _build(SyntheticTaskSpec, doc.get("target"), "target")
    kwargs["pretrain"] = _build(TrainConfig, doc.get("pretrain"), "pretrain")
    finetune = dict(doc.get("finetune") or {})
    norm = dict(doc.get("norm") or {})
    unknown = sorted(set(norm) - set(_NORM_KEYS))
    if unknown:
        raise ConfigError(f"norm: unknown keys {unknown}")
    finetune.update({_NORM_KEYS[k]: v for k, v in norm.items()})  # norm.kind is shorthand for finetune.norm_kind
    kwargs["finetune"] = _build(TrainConfig, finetune, "finetune")
    if "arms" in doc:
        kwargs["arms"] = [Arm.parse(a) for a in doc["arms"]]
    if doc.get("zoo"):
        zoo = dict(doc["zoo"])
        members = [_build(ZooMember, m, "zoo.members") for m in zoo.pop("members", [])]
        if len(members) < 2:
            raise ConfigError("zoo needs at least two members")
        kwargs["zoo"] = _build(ZooConfig, {**zoo, "members": members}, "zoo")

    env = os.environ if env is None else env
    if env.get(SEED_ENV, "").strip():
        try:
            kwargs["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    return ExperimentConfig(**kwargs)


def load_config(path, env=None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    text = path.read_text()
    try:
        doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(doc, env)


def task_with_seed(spec: SyntheticTaskSpec, run_seed, **overrides) -> SyntheticTaskSpec:
    """The task spec used for one run: the data seed (``overrides`` may replace it) is offset by the run seed."""
    base = overrides.pop("seed", spec.seed)
    return replace(spec, **overrides, seed=base + run_seed)
