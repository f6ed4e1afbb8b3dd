"""TOML configuration: one section per stage, all keys optional.

    [pipeline]  seed, scans, folds, train_frac, val_frac, sampler, features,
                augment, jobs, padding_mm, target_mm
    [phantom]   PhantomConfig fields
    [detector]  DetectorConfig fields
    [sampler]   m, mask_quota, sigma_ratio, max_draws, seed
    [augment]   AugmentConfig fields
    [train]     TrainConfig fields (lr0, epochs, batch_size, use_edgeconv, ...)
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .augment import AugmentConfig
from .model import FeatureSet, TrainConfig
from .phantom import DetectorConfig, PhantomConfig
from .sampling import SamplerConfig


def from_section(cls, section: dict | None, **overrides):
    """Build dataclass ``cls`` from a config section; lists become tuples."""
    names = {f.name for f in dataclasses.fields(cls)}
    section = dict(section or {})
    unknown = set(section) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in section.items()}
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**kw)


@dataclass
class PipelineConfig:
    seed: int = 0
    scans: int = 12
    folds: int = 4
    train_frac: float = 0.75
    val_frac: float = 0.0
    sampler: str = "rbf"
    features: str = "xyz-hu-p"
    augment: bool = False
    jobs: int = 1
    padding_mm: float = 16.0
    target_mm: float = 1.0
    sections: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.sampler not in ("rbf", "uniform"):
            raise ValueError(f"sampler must be 'rbf' or 'uniform', got {self.sampler!r}")
        FeatureSet(self.features)

    def phantom(self) -> PhantomConfig:
        return from_section(PhantomConfig, self.sections.get("phantom"))

    def detector(self) -> DetectorConfig:
        return from_section(DetectorConfig, self.sections.get("detector"))

    def sampler_config(self, **overrides) -> SamplerConfig:
        sec = dict(self.sections.get("sampler") or {})
        sec.setdefault("seed", self.seed)
        return from_section(SamplerConfig, sec, **overrides)

    def augment_config(self) -> AugmentConfig:
        sec = dict(self.sections.get("augment") or {})
        sec.setdefault("seed", self.seed)
        return from_section(AugmentConfig, sec)

    def train_config(self, **overrides) -> TrainConfig:
        sec = dict(self.sections.get("train") or {})
        sec.setdefault("seed", self.seed)
        sec.setdefault("feature_set", self.features)
        sec.setdefault("augment", self.augment)
        return from_section(TrainConfig, sec, augment_cfg=self.augment_config(), **overrides)


def load_config(path=None, **overrides) -> PipelineConfig:
    data = {}
    if path:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    sections = {k: v for k, v in data.items() if k != "pipeline"}
    known = {"phantom", "detector", "sampler", "augment", "train"}
    if set(sections) - known:
        raise ValueError(f"unknown config sections: {sorted(set(sections) - known)}")
    return from_section(PipelineConfig, data.get("pipeline"), sections=sections, **overrides)
