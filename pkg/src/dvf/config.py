"""Run configuration: TOML sections with full defaulting, presets and ``--set`` overrides."""

from __future__ import annotations

import copy
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from dvf.dataset import AugmentationPolicy
from dvf.encoder import EncoderConfig
from dvf.errors import ConfigurationError
from dvf.model import ModelConfig
from dvf.ovf import OvfConfig
from dvf.retrieval import DEFAULT_KS
from dvf.training import LossConfig, TrainConfig


@dataclass
class DatasetSection:
    root: str = "data/images"
    split_mode: str = "open"
    fraction: float = 0.5
    meta_category: str = "object"


@dataclass
class OvfSection:
    enabled: bool = True
    alpha: float = 0.5
    enlarge_factor: float = 1.1
    aspect: list = field(default_factory=lambda: [3, 4])
    provider: str = "fixture"  # fixture | http
    fixtures: str = "data/detections"
    endpoint: str = ""
    timeout: float = 30.0
    cache_dir: str = ""
    prompt: str = ""  # empty: use dataset.meta_category

    def to_ovf(self) -> OvfConfig:
        return OvfConfig(alpha=self.alpha, enlarge_factor=self.enlarge_factor, target_aspect=tuple(self.aspect))


@dataclass
class ModelSection:
    image_size: int = 224
    patch_size: int = 16
    depth: int = 12
    dim: int = 768
    heads: int = 12
    mlp_ratio: float = 4.0
    k: int = 12
    svf_enabled: bool = True
    importance_enabled: bool = True
    pretrained: str = ""

    def to_model(self) -> ModelConfig:
        enc = EncoderConfig(self.image_size, self.patch_size, self.depth, self.dim, self.heads, self.mlp_ratio)
        return ModelConfig(enc, self.svf_enabled, self.k, self.importance_enabled)


@dataclass
class TrainSection:
    beta: float = 0.5
    batch_size: int = 32
    lr: float = 3e-2
    epochs: int = 10
    proxy_lr_mult: float = 10.0
    scheduler: str = "cosine"
    seed: int = 0
    use_augmentation: bool = True
    use_contrastive: bool = True
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)

    def to_train(self) -> TrainConfig:
        loss = LossConfig(self.beta, self.batch_size, self.lr, self.epochs, self.proxy_lr_mult, self.scheduler)
        return TrainConfig(loss, self.augmentation, self.seed, self.use_augmentation, self.use_contrastive)


@dataclass
class EvalSection:
    ks: list = field(default_factory=lambda: list(DEFAULT_KS))
    batch_size: int = 64


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    ovf: OvfSection = field(default_factory=OvfSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    output_dir: str = "runs/dvf"

    def to_json(self) -> dict:
        payload = asdict(self)
        payload["train"]["augmentation"]["blur_sigma_range"] = list(self.train.augmentation.blur_sigma_range)
        return payload

    @classmethod
    def from_json(cls, payload: dict) -> "RunConfig":
        return _build(cls, payload, "")

    def to_toml(self) -> str:
        return _to_toml(self.to_json())


# Overrides layered on the defaults. The toy preset is the small from-scratch
# setting used for desk-scale runs on the synthetic corpus.
PRESETS: dict[str, dict] = {
    "paper": {},
    "toy": {
        "dataset": {"split_mode": "closed", "meta_category": "shape"},
        "model": {"depth": 4, "dim": 64, "heads": 4, "k": 12},
        "train": {"batch_size": 8, "lr": 2e-3, "epochs": 20},
    },
}


def _merge(base: dict, extra: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if key not in out:
            raise ConfigurationError(f"unknown config key {where}{key}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"config key {where}{key} is a section, got {value!r}")
            out[key] = _merge(out[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def _build(cls, payload: dict, where: str):
    kwargs = {}
    known = {f.name: f for f in fields(cls)}
    for key, value in payload.items():
        if key not in known:
            raise ConfigurationError(f"unknown config key {where}{key}")
        factory = known[key].default_factory
        if callable(factory) and is_dataclass(factory):
            value = _build(factory, value, f"{where}{key}.")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"bad config section {where or '<root>'}: {exc}") from exc


def parse_override(text: str) -> tuple[list[str], Any]:
    """``a.b.c=value`` with a TOML-typed value; bare words fall back to strings."""
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ConfigurationError(f"override {text!r} has an empty key")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return path, value


def _nest(path: list[str], value) -> dict:
    out: dict = value
    for part in reversed(path):
        out = {part: out}
    return out


def load_config(path: str | Path | None = None, preset: str = "paper", overrides=()) -> RunConfig:
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    payload = _merge(RunConfig().to_json(), PRESETS[preset])
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file {path} not found")
        try:
            payload = _merge(payload, tomllib.loads(path.read_text()))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
    for text in overrides:
        key, value = parse_override(text)
        payload = _merge(payload, _nest(key, value))
    return RunConfig.from_json(payload)


def _to_toml(payload: dict) -> str:
    lines: list[str] = []

    def scalar(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(scalar(x) for x in v) + "]"
        return repr(v)

    def section(name, d):
        flat = {k: v for k, v in d.items() if not isinstance(v, dict)}
        if name:
            lines.append(f"[{name}]")
        lines.extend(f"{k} = {scalar(v)}" for k, v in flat.items())
        lines.append("")
        for k, v in d.items():
            if isinstance(v, dict):
                section(f"{name}.{k}" if name else k, v)

    section("", payload)
    return "\n".join(lines).strip() + "\n"
