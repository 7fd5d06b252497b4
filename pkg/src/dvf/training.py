"""Proxy-NCA + margin contrastive objective and the seeded training loop."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from dvf.dataset import AugmentationPolicy, DatasetManifest, ImageFeed, ImageRecord
from dvf.errors import ConfigurationError, NumericsError
from dvf.model import DVFModel, ProxyBank, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class LossConfig:
    beta: float = 0.5
    batch_size: int = 32
    lr: float = 3e-2
    epochs: int = 10
    proxy_lr_mult: float = 10.0
    scheduler: str = "cosine"

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ConfigurationError(f"beta must lie in [0, 1), got {self.beta}")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2")
        if self.lr < 0 or self.epochs < 0:
            raise ConfigurationError("lr and epochs must be non-negative")
        if self.scheduler not in ("cosine", "constant"):
            raise ConfigurationError(f"unknown scheduler {self.scheduler!r}")


@dataclass
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    seed: int = 0
    use_augmentation: bool = True
    use_contrastive: bool = True
    cache_images: bool = True


def proxynca_loss(embeddings: torch.Tensor, labels, bank: ProxyBank, reduction: str = "mean") -> torch.Tensor:
    """Negative log-softmax of ``-||e - c||^2`` at the true proxy; both sides L2-normalized first."""
    if embeddings.ndim == 1:
        embeddings = embeddings.unsqueeze(0)
        labels = [labels] if not isinstance(labels, (list, tuple, torch.Tensor)) else labels
    rows = bank.rows(labels if not isinstance(labels, torch.Tensor) else labels.tolist()).to(embeddings.device)
    e = F.normalize(embeddings, dim=-1)
    c = F.normalize(bank.proxies, dim=-1).to(e.dtype)
    dist = (e.unsqueeze(1) - c.unsqueeze(0)).pow(2).sum(-1)
    per_sample = -F.log_softmax(-dist, dim=1).gather(1, rows.unsqueeze(1)).squeeze(1)
    return per_sample.mean() if reduction == "mean" else per_sample


def contrastive_loss(embeddings: torch.Tensor, labels, beta: float = 0.5) -> torch.Tensor:
    """Sum of (1 - sim) over same-label pairs and hinge(sim - beta) over the rest, divided by B^2.

    Self-pairs are kept; they add exactly zero for unit-norm embeddings.
    """
    labels = torch.as_tensor(labels, device=embeddings.device)
    sim = embeddings @ embeddings.T
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    # sim <= 1 for unit vectors; the clamp only absorbs rounding on self-pairs
    pos = torch.where(same, (1.0 - sim).clamp_min(0.0), torch.zeros_like(sim))
    neg = torch.where(same, torch.zeros_like(sim), (sim - beta).clamp_min(0.0))
    return (pos + neg).sum() / embeddings.shape[0] ** 2


def total_loss(
    embeddings: torch.Tensor, labels, bank: ProxyBank, beta: float = 0.5, use_contrastive: bool = True
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Returns (total, proxy-nca mean, contrastive)."""
    pnca = proxynca_loss(embeddings, labels, bank)
    con = contrastive_loss(embeddings, labels, beta) if use_contrastive else pnca.new_zeros(())
    return pnca + con, pnca, con


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    losses: list[float]
    bank: ProxyBank


def _batches(n: int, batch_size: int, generator: torch.Generator) -> list[list[int]]:
    perm = torch.randperm(n, generator=generator).tolist()
    out = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    # a singleton batch has no pairs for the contrastive term
    if len(out) > 1 and len(out[-1]) < 2:
        out.pop()
    return out


def _lr_at(base: float, step: int, total: int, scheduler: str) -> float:
    if scheduler == "constant" or total <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * step / total))


def train(
    manifest: DatasetManifest | Sequence[ImageRecord],
    model: DVFModel,
    cfg: TrainConfig,
    out_dir: str | Path,
) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = manifest.split("train") if isinstance(manifest, DatasetManifest) else list(manifest)
    if not records:
        raise ConfigurationError("training split is empty")

    torch.manual_seed(cfg.seed)
    feed = ImageFeed(records, model.cfg.encoder.image_size, cfg.cache_images)
    bank = ProxyBank([r.label for r in records], model.cfg.encoder.dim, seed=cfg.seed)
    loss_cfg = cfg.loss
    policy = cfg.augmentation if cfg.use_augmentation else replace(AugmentationPolicy.identity(), hflip_prob=cfg.augmentation.hflip_prob)

    opt = torch.optim.Adam(
        [
            {"params": list(model.parameters()), "lr": loss_cfg.lr, "base_lr": loss_cfg.lr},
            {"params": list(bank.parameters()), "lr": loss_cfg.lr * loss_cfg.proxy_lr_mult, "base_lr": loss_cfg.lr * loss_cfg.proxy_lr_mult},
        ]
    )
    shuffle = torch.Generator().manual_seed(cfg.seed)
    steps_per_epoch = len(_batches(len(feed), loss_cfg.batch_size, torch.Generator().manual_seed(0)))
    total_steps = steps_per_epoch * loss_cfg.epochs

    ckpt_path = out_dir / "checkpoint.dvfc"
    log_path = out_dir / "train_log.jsonl"
    meta = {"train_config": _config_json(cfg)}
    last_good = (copy.deepcopy(model.state_dict()), copy.deepcopy(bank.state_dict()))
    losses: list[float] = []
    step = 0
    model.train()
    with log_path.open("w") as log_fh:
        for epoch in range(loss_cfg.epochs):
            for idx in _batches(len(feed), loss_cfg.batch_size, shuffle):
                lr = _lr_at(loss_cfg.lr, step, total_steps, loss_cfg.scheduler)
                for group in opt.param_groups:
                    group["lr"] = group["base_lr"] * lr / loss_cfg.lr if loss_cfg.lr else 0.0
                images, labels = feed.train_batch(idx, policy, cfg.seed, epoch)
                try:
                    emb, _ = model.encode(images)
                    loss, pnca, con = total_loss(emb, labels, bank, loss_cfg.beta, cfg.use_contrastive)
                    if not torch.isfinite(loss):
                        raise NumericsError(f"non-finite loss at step {step}")
                except NumericsError:
                    model.load_state_dict(last_good[0])
                    bank.load_state_dict(last_good[1])
                    save_checkpoint(ckpt_path, model, bank, {**meta, "aborted_at_step": step})
                    raise
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                record = {
                    "step": step,
                    "epoch": epoch,
                    "lr": lr,
                    "loss_pnca": pnca.item(),
                    "loss_con": con.item(),
                    "loss_total": loss.item(),
                }
                log_fh.write(json.dumps(record) + "\n")
                losses.append(loss.item())
                step += 1
            log.info("epoch %d mean loss %.4f", epoch, float(np.mean(losses[-steps_per_epoch:])) if losses else float("nan"))
            last_good = (copy.deepcopy(model.state_dict()), copy.deepcopy(bank.state_dict()))
    model.eval()
    save_checkpoint(ckpt_path, model, bank, {**meta, "steps": step})
    return TrainResult(ckpt_path, log_path, losses, bank)


def _config_json(cfg: TrainConfig) -> dict:
    payload = asdict(cfg)
    payload["augmentation"]["blur_sigma_range"] = list(cfg.augmentation.blur_sigma_range)
    return payload
