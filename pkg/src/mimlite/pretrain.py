"""Epoch loop for MAE pre-training, with optional distillation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable

import torch

from .data import batch_indices, random_resized_crop_flip
from .distill import Distiller, distilled_pretrain_step
from .mae import MaskedAutoencoder, pretrain_step
from .optim import cosine_schedule, decay_groups, effective_lr, set_lr
from .vit import ConfigError, VisionTransformer

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    ratio: float = 0.75
    epochs: int = 400
    batch_size: int = 4096
    base_lr: float = 1.5e-4
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    warmup_epochs: int = 40
    min_lr: float = 0.0
    normalize_targets: bool = True
    augment: bool = True
    crop_scale: tuple[float, float] = (0.2, 1.0)
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.ratio < 1:
            raise ConfigError(f"pretrain.ratio must be in [0, 1), got {self.ratio}")
        if self.warmup_epochs > self.epochs:
            raise ConfigError("pretrain.warmup_epochs exceeds pretrain.epochs")
        if self.batch_size < 1:
            raise ConfigError("pretrain.batch_size must be >= 1")

    @property
    def peak_lr(self) -> float:
        return effective_lr(self.base_lr, self.batch_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        d = dict(d)
        for k in ("betas", "crop_scale"):
            if k in d:
                d[k] = tuple(d[k])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown [pretrain] keys: {sorted(unknown)}")
        return cls(**d)


def make_pretrain_optimizer(mae: MaskedAutoencoder, cfg: PretrainConfig, distiller: Distiller | None = None):
    groups = decay_groups(mae.named_parameters(), cfg.weight_decay)
    if distiller is not None:
        # alignment matrices are not representation capacity: no weight decay
        groups.append({"params": list(distiller.parameters()), "weight_decay": 0.0, "lr_scale": 1.0})
    return torch.optim.AdamW(groups, lr=cfg.peak_lr, betas=cfg.betas)


def run_pretraining(
    mae: MaskedAutoencoder,
    images: torch.Tensor,
    cfg: PretrainConfig,
    teacher: VisionTransformer | None = None,
    distiller: Distiller | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Pre-train ``mae`` on ``images`` and return the per-step loss history.

    Batch order, augmentation and masks all draw from one generator seeded
    with ``cfg.seed``, so a run is reproducible bit for bit.
    """
    if (teacher is None) != (distiller is None):
        raise ConfigError("teacher and distiller must be given together")
    opt = make_pretrain_optimizer(mae, cfg, distiller)
    g = torch.Generator().manual_seed(cfg.seed)
    n = len(images)
    if n < cfg.batch_size:
        raise ConfigError(f"{n} images cannot fill a batch of {cfg.batch_size}")
    steps_per_epoch = n // cfg.batch_size
    total = steps_per_epoch * cfg.epochs
    warmup = steps_per_epoch * cfg.warmup_epochs
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        for idx in batch_indices(n, cfg.batch_size, g, drop_last=True):
            set_lr(opt, cosine_schedule(step, total, warmup, cfg.peak_lr, cfg.min_lr))
            x = images[idx]
            if cfg.augment:
                x = random_resized_crop_flip(x, g, scale=cfg.crop_scale)
            if distiller is None:
                out = pretrain_step(mae, opt, x, cfg.ratio, g, cfg.normalize_targets)
                out["distill_loss"] = 0.0
            else:
                out = distilled_pretrain_step(mae, teacher, distiller, opt, x, cfg.ratio, g, cfg.normalize_targets)
            row = {
                "step": step,
                "recon_loss": out["recon_loss"],
                "distill_loss": out["distill_loss"],
                "total": out["total"],
            }
            history.append(row)
            if on_step is not None:
                on_step(row)
            step += 1
        if history:
            log.info("pretrain epoch %d/%d total %.4f", epoch + 1, cfg.epochs, history[-1]["total"])
    return history
