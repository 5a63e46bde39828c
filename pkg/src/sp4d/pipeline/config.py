"""Run configuration: one JSON document, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigError
from ..fusion.model import ModelConfig
from ..fusion.train import TrainConfig


@dataclass
class SampleSection:
    steps: int = 12
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0


@dataclass
class BackmapSection:
    min_cluster_size: int = 3
    color_tol: float = 1.0 / 64
    min_area: int = 4
    bg_tol: float = 0.1


@dataclass
class SkinningSection:
    weighting: str = "cotangent"
    tol: float = 1e-8
    solver: str = "direct"
    min_cluster_size: int = 10


@dataclass
class CurationSection:
    motion_tol: float = 0.05
    feature_tol: float = 0.1
    max_bones: int = 100
    bg_eps: float = 1e-4


@dataclass
class EvalSection:
    first_image_filter: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: dict = field(default_factory=dict)      # TrainConfig fields except seed
    sample: SampleSection = field(default_factory=SampleSection)
    backmap: BackmapSection = field(default_factory=BackmapSection)
    skinning: SkinningSection = field(default_factory=SkinningSection)
    curation: CurationSection = field(default_factory=CurationSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def train_config(self, **overrides) -> TrainConfig:
        doc = {"seed": self.seed, **self.train, **overrides}
        return TrainConfig(**doc)

    def to_dict(self) -> dict:
        d = {"seed": self.seed, "model": self.model.to_dict(), "train": dict(self.train)}
        for name in ("sample", "backmap", "skinning", "curation", "eval"):
            d[name] = dataclasses.asdict(getattr(self, name))
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


_SECTIONS = {
    "model": ModelConfig,
    "sample": SampleSection,
    "backmap": BackmapSection,
    "skinning": SkinningSection,
    "curation": CurationSection,
    "eval": EvalSection,
}


def _build(cls, doc, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    top = {"seed", "train", *_SECTIONS}
    unknown = sorted(set(doc) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}")
    kw = {}
    if "seed" in doc:
        if not isinstance(doc["seed"], int):
            raise ConfigError("seed must be an integer")
        kw["seed"] = doc["seed"]
    for name, cls in _SECTIONS.items():
        if name in doc:
            kw[name] = _build(cls, doc[name], name)
    train = doc.get("train", {})
    if not isinstance(train, dict):
        raise ConfigError("train: expected an object")
    allowed = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed"}
    unknown = sorted(set(train) - allowed)
    if unknown:
        raise ConfigError(f"train: unknown key(s) {unknown}")
    cfg = RunConfig(**kw, train=dict(train))
    try:
        cfg.train_config()
    except TypeError as exc:
        raise ConfigError(f"train: {exc}") from None
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return from_dict(doc)
