"""JSON configuration: profiles with inheritance, per-stage sections, dotted overrides."""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from .imagedata import DegradationKind, parse_kinds
from .losses import LossWeights
from .networks import BackboneConfig, DiscriminatorConfig, PhiConfig

CONFIG_DIR_ENV = "UNIREMOVAL_CONFIG_DIR"
DEFAULT_CONFIG_NAME = "default.json"
STAGES = ("teacher", "kt", "da")


def default_config_path() -> Path:
    env = os.environ.get(CONFIG_DIR_ENV)
    if env:
        return Path(env) / DEFAULT_CONFIG_NAME
    return Path(str(resources.files("uniremoval") / "configs" / DEFAULT_CONFIG_NAME))


def load_config_file(path=None) -> dict:
    path = Path(path) if path else default_config_path()
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def deep_merge(base: Mapping, update: Mapping) -> dict:
    out = copy.deepcopy(dict(base))
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), Mapping):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_profile(raw: Mapping, profile: str) -> dict:
    profiles = raw["profiles"]
    if profile not in profiles:
        raise KeyError(f"unknown profile {profile!r}; available: {sorted(profiles)}")
    chain, name = [], profile
    while name is not None:
        if name in chain:
            raise ValueError(f"profile inheritance cycle at {name!r}")
        chain.append(name)
        name = profiles[name].get("inherits")
    resolved: dict = {}
    for name in reversed(chain):
        body = {k: v for k, v in profiles[name].items() if k != "inherits"}
        resolved = deep_merge(resolved, body)
    return resolved


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides: Iterable[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as JSON when possible."""
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise KeyError(f"override key {key!r}: {part!r} is not a section")
            node = node[part]
        if parts[-1] not in node:
            raise KeyError(f"override key {key!r} does not exist in the configuration")
        node[parts[-1]] = parse_value(text)
    return cfg


def stage_dict(profile_cfg: Mapping, stage: str) -> dict:
    """Flatten a resolved profile for one stage (stage keys win)."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; choose from {STAGES}")
    flat = {k: copy.deepcopy(v) for k, v in profile_cfg.items() if k != "stages"}
    flat = deep_merge(flat, profile_cfg.get("stages", {}).get(stage, {}))
    flat["stage"] = stage
    return flat


@dataclass(frozen=True)
class TrainConfig:
    stage: str
    seed: int = 0
    kinds: tuple = tuple(DegradationKind)
    batch_size: int = 16
    patch_size: int = 128
    tau: float = 1e-6
    epochs: int = 400
    iterations: int | None = None
    lr: float = 2e-5
    betas: tuple = (0.9, 0.999)
    weights: LossWeights = field(default_factory=LossWeights)
    alpha1_decay: float = 0.99
    lambda1_decay: float = 0.99
    lambda4: float = 0.01
    negatives: str = "others"
    gan_real_input: str = "clear"
    holdout_fraction: float = 0.1
    deterministic: bool = True
    threads: int = 1
    log_every: int = 1
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    phi: PhiConfig = field(default_factory=PhiConfig)
    data: dict = field(default_factory=dict)
    workdir: str = "runs"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.batch_size % len(self.kinds) and self.stage != "teacher":
            raise ValueError(f"batch size {self.batch_size} is not divisible by {len(self.kinds)} kinds")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.gan_real_input not in ("clear", "restored_clear"):
            raise ValueError(f"gan_real_input must be 'clear' or 'restored_clear', got {self.gan_real_input!r}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        weights = dict(d.pop("weights", {}) or {})
        lambda4 = weights.pop("lambda4", d.pop("lambda4", 0.01))
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown configuration keys: {sorted(unknown)}")
        phi = dict(d.pop("phi", {}) or {})
        return cls(
            **{k: v for k, v in d.items() if k not in ("kinds", "betas", "backbone", "discriminator")},
            kinds=parse_kinds(d.get("kinds", [k.label for k in DegradationKind])),
            betas=tuple(d.get("betas", (0.9, 0.999))),
            weights=LossWeights(**weights),
            lambda4=lambda4,
            backbone=BackboneConfig(**d.get("backbone", {})),
            discriminator=DiscriminatorConfig(**d.get("discriminator", {})),
            phi=PhiConfig(**phi),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kinds"] = [DegradationKind(k).label for k in self.kinds]
        d["betas"] = list(self.betas)
        return d

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        for key, value in changes.items():
            d[key] = asdict(value) if hasattr(value, "__dataclass_fields__") else value
        return TrainConfig.from_dict(d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def load_train_config(stage: str, profile: str = "desk", path=None, overrides: Iterable[str] = ()) -> TrainConfig:
    raw = load_config_file(path)
    flat = stage_dict(resolve_profile(raw, profile), stage)
    flat = apply_overrides(flat, overrides)
    return TrainConfig.from_dict(flat)
