"""Run configuration: typed sections, JSON loading, overrides and fingerprints.

Precedence is defaults < config file < command-line flags. Unknown keys
are rejected everywhere so a typo never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .diffusion import DenoiserTraining
from .guidance import GuidanceConfig
from .pipeline import SamplerConfig
from .prototypes import ClassifierTraining


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    generator: str = "shift"
    num_classes: int = 3
    n_per_class: int = 20
    n_test_per_class: int = 300
    n_diffusion_per_class: int = 1500
    dim: int = 2
    scale: float = 0.5
    num_modes: int = 6
    ring_radius: float = 2.0
    class_offset: float = 2.5
    target_spread: float = 0.15
    broad_spread: float = 0.35
    clusters_per_class: int = 2


@dataclass
class DiffusionSection:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    time_embed_dim: int = 8
    hidden: list = field(default_factory=lambda: [128, 128])
    epochs: int = 200
    batch: int = 256
    lr: float = 2e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    cfg_dropout: float = 0.1
    sampler: str = "ddim"
    sample_steps: int = 50
    cfg_scale: float = 7.5
    eta: float = 0.0

    def training(self) -> DenoiserTraining:
        return DenoiserTraining(self.epochs, self.batch, self.lr, self.cfg_dropout, tuple(self.hidden),
                                self.time_embed_dim, self.optimizer, self.momentum)


@dataclass
class ExtractorSection:
    hidden: list = field(default_factory=lambda: [64, 64])
    epochs: int = 100
    lr: float = 5e-3
    batch: int = 64
    optimizer: str = "adam"
    momentum: float = 0.9

    def training(self) -> ClassifierTraining:
        return ClassifierTraining(self.epochs, self.lr, self.batch, tuple(self.hidden), self.optimizer,
                                  self.momentum)


@dataclass
class PrototypeSection:
    K: int = 3


@dataclass
class ExpansionSection:
    factor: int = 5
    strength: float = 0.5
    chunk: int = 256


@dataclass
class EvaluationSection:
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    space: str = "feature"
    max_samples: int = 3000
    bandwidth: str | float = "median"
    hidden: list = field(default_factory=lambda: [64, 64])
    epochs: int = 100
    lr: float = 5e-3
    batch: int = 64
    optimizer: str = "adam"

    def classifier(self) -> ClassifierTraining:
        return ClassifierTraining(self.epochs, self.lr, self.batch, tuple(self.hidden), self.optimizer)


SECTIONS = {
    "data": DataSection,
    "diffusion": DiffusionSection,
    "extractor": ExtractorSection,
    "prototypes": PrototypeSection,
    "guidance": GuidanceConfig,
    "expansion": ExpansionSection,
    "evaluation": EvaluationSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    extractor: ExtractorSection = field(default_factory=ExtractorSection)
    prototypes: PrototypeSection = field(default_factory=PrototypeSection)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    expansion: ExpansionSection = field(default_factory=ExpansionSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def fingerprint(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self.diffusion.sample_steps, self.expansion.strength, self.diffusion.cfg_scale,
                             self.diffusion.eta, self.diffusion.sampler)

    def validate(self) -> None:
        try:
            self.sampler().validate()
            self.guidance.validate(self.diffusion.sample_steps)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.prototypes.K < 1:
            raise ConfigError("prototypes.K must be at least 1")
        if self.expansion.factor < 0:
            raise ConfigError("expansion.factor must be non-negative")
        if self.evaluation.space not in ("feature", "data"):
            raise ConfigError("evaluation.space must be 'feature' or 'data'")

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Copy with ``{"section.key": value}`` or nested-section overrides applied."""
        doc = self.to_dict()
        for key, value in _flatten(overrides).items():
            _set(doc, key, value)
        return from_dict(doc)


def _flatten(doc: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and k in SECTIONS and not prefix:
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _set(doc: dict, dotted: str, value) -> None:
    if dotted == "seed":
        doc["seed"] = int(value)
        return
    section, _, key = dotted.partition(".")
    if section not in SECTIONS or not key:
        raise ConfigError(f"unknown config key {dotted!r}")
    valid = {f.name for f in fields(SECTIONS[section])}
    if key not in valid:
        raise ConfigError(f"unknown key {key!r} in section {section!r}")
    doc[section][key] = value


def _coerce(cls, name: str, value):
    ref = getattr(cls(), name)
    if name == "bandwidth":
        if value == "median":
            return value
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value <= 0:
            raise ConfigError("evaluation.bandwidth must be 'median' or a positive number")
        return float(value)
    if isinstance(ref, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{cls.__name__}.{name} must be a boolean")
        return value
    if isinstance(ref, int) and not isinstance(ref, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{cls.__name__}.{name} must be an integer")
        return value
    if isinstance(ref, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{cls.__name__}.{name} must be a number")
        return float(value)
    if isinstance(ref, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{cls.__name__}.{name} must be a list")
        return list(value)
    if isinstance(ref, str) and not isinstance(value, str):
        raise ConfigError(f"{cls.__name__}.{name} must be a string")
    return value


def _section(cls, doc: dict):
    if not isinstance(doc, dict):
        raise ConfigError(f"section {cls.__name__} must be an object")
    valid = {f.name for f in fields(cls)}
    unknown = set(doc) - valid
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} for {cls.__name__}")
    return cls(**{k: _coerce(cls, k, v) for k, v in doc.items()})


def from_dict(doc: dict) -> RunConfig:
    unknown = set(doc) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {sorted(unknown)}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        raise ConfigError("seed must be a 64-bit non-negative integer")
    kwargs = {name: _section(cls, doc.get(name, {})) for name, cls in SECTIONS.items()}
    cfg = RunConfig(seed=seed, **kwargs)
    cfg.validate()
    return cfg


def load(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(doc)
