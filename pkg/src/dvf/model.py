"""Encoder + optional token filter, and the training checkpoint that bundles them with the proxy bank."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn

from dvf.checkpoint import load_state_into, load_tensors, save_tensors
from dvf.encoder import EncoderConfig, VisionTransformer
from dvf.errors import ConfigurationError, LabelError
from dvf.svf import DEFAULT_K, SemanticFilter


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    svf_enabled: bool = True
    k: int = DEFAULT_K
    importance_enabled: bool = True

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, payload: dict) -> "ModelConfig":
        payload = dict(payload)
        payload["encoder"] = EncoderConfig(**payload["encoder"])
        return cls(**payload)


class DVFModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = VisionTransformer(cfg.encoder)
        self.svf = SemanticFilter(cfg.encoder.dim, cfg.k, cfg.importance_enabled) if cfg.svf_enabled else None

    def encode(self, images: torch.Tensor) -> tuple[torch.Tensor, dict]:
        return self.encoder.encode(images, self.svf)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.encode(images)[0]


def build_model(cfg: ModelConfig, seed: int = 0) -> DVFModel:
    torch.manual_seed(seed)
    return DVFModel(cfg)


class ProxyBank(nn.Module):
    """One learnable proxy row per training label."""

    def __init__(self, labels, dim: int, seed: int = 0):
        super().__init__()
        labels = sorted(set(int(l) for l in labels))
        if not labels:
            raise ConfigurationError("proxy bank needs at least one label")
        self.label_index = {l: i for i, l in enumerate(labels)}
        g = torch.Generator().manual_seed(seed)
        init = torch.randn(len(labels), dim, generator=g)
        self.proxies = nn.Parameter(init / init.norm(dim=1, keepdim=True))

    @property
    def num_classes(self) -> int:
        return self.proxies.shape[0]

    def rows(self, labels) -> torch.Tensor:
        try:
            return torch.tensor([self.label_index[int(l)] for l in labels], dtype=torch.long)
        except KeyError as exc:
            raise LabelError(f"label {exc.args[0]} has no proxy") from exc


def save_checkpoint(path: str | Path, model: DVFModel, bank: ProxyBank | None = None, meta: dict | None = None) -> None:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    header = {"model_config": model.cfg.to_json(), **(meta or {})}
    if bank is not None:
        tensors["proxies"] = bank.proxies
        header["label_index"] = {str(k): v for k, v in bank.label_index.items()}
    save_tensors(path, tensors, header)


def load_checkpoint(path: str | Path) -> tuple[DVFModel, ProxyBank | None, dict]:
    tensors, meta = load_tensors(path)
    model = DVFModel(ModelConfig.from_json(meta["model_config"]))
    load_state_into(model, tensors, prefix="model.")
    bank = None
    if "proxies" in tensors:
        index = {int(k): v for k, v in meta["label_index"].items()}
        labels = sorted(index, key=index.get)
        bank = ProxyBank(labels, tensors["proxies"].shape[1])
        with torch.no_grad():
            bank.proxies.copy_(torch.from_numpy(tensors["proxies"]))
    model.eval()
    return model, bank, meta


def load_pretrained_encoder(model: DVFModel, path: str | Path, prefix: str = "") -> None:
    """Load encoder weights from a DVFC file whose tensor names follow this encoder's state dict."""
    tensors, _ = load_tensors(path)
    load_state_into(model.encoder, tensors, prefix=prefix)
