"""Supervised training, fine-tuning with layer-wise lr decay, and linear probing."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import PIXEL_MEAN, PIXEL_STD, ImageDataset, Splits, batch_indices, random_resized_crop_flip
from .mae import check_finite
from .optim import cosine_schedule, effective_lr, layerwise_lr_groups, set_lr
from .vit import ConfigError, VisionTransformer, seeded, state_checksum

log = logging.getLogger(__name__)

OPTIMIZERS = ("adamw", "sgd")


@dataclass(frozen=True)
class Recipe:
    optimizer: str = "adamw"
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    momentum: float = 0.9
    batch_size: int = 1024
    epochs: int = 300
    warmup_epochs: int = 5
    min_lr: float = 1e-6
    layerwise_decay: float = 1.0
    # False: base_lr is used as-is instead of base_lr * batch / 256
    lr_scaling: bool = True
    random_resized_crop: bool = True
    crop_scale: tuple[float, float] = (0.35, 1.0)
    hflip: bool = True
    randaug: bool = False
    color_jitter: float = 0.0
    label_smoothing: float = 0.0
    mixup_alpha: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.warmup_epochs > self.epochs:
            raise ConfigError(f"warmup_epochs {self.warmup_epochs} > epochs {self.epochs}")
        if not 0 < self.layerwise_decay <= 1:
            raise ConfigError(f"layerwise_decay must be in (0, 1], got {self.layerwise_decay}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @property
    def peak_lr(self) -> float:
        return effective_lr(self.base_lr, self.batch_size) if self.lr_scaling else self.base_lr

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Recipe":
        d = dict(d)
        for k in ("betas", "crop_scale"):
            if k in d:
                d[k] = tuple(d[k])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown recipe keys: {sorted(unknown)}")
        return cls(**d)


def supervised_recipe(**overrides) -> Recipe:
    """Supervised ViT-Tiny recipe on IN1K (AdamW, cosine, 300 epochs)."""
    base = Recipe(
        optimizer="adamw", base_lr=1e-3, weight_decay=0.05, betas=(0.9, 0.999), batch_size=1024,
        epochs=300, warmup_epochs=5, randaug=True, color_jitter=0.3, label_smoothing=0.0, mixup_alpha=0.2,
    )
    return replace(base, **overrides)


# Transfer sweeps: learning rates x (epochs, warmup) x layer-wise decay, SGD momentum 0.9, batch 512
TRANSFER_SWEEPS = {
    "flowers": {"lr": (0.01, 0.03, 0.1), "epochs": ((150, 30), (250, 50))},
    "pets": {"lr": (0.01, 0.03, 0.1), "epochs": ((70, 14), (150, 30))},
    "aircraft": {"lr": (0.01, 0.03, 0.1), "epochs": ((50, 10), (100, 20))},
    "cars": {"lr": (0.01, 0.03, 0.1), "epochs": ((50, 10), (100, 20))},
    "cifar100": {"lr": (0.03, 0.1, 0.3), "epochs": ((25, 5), (50, 10))},
}
TRANSFER_DECAYS = (1.0, 0.75)


def transfer_recipes(dataset: str, **overrides) -> list[Recipe]:
    """Expand one transfer sweep into its 12 candidate recipes."""
    sweep = TRANSFER_SWEEPS[dataset.lower()]
    out = []
    for lr in sweep["lr"]:
        for epochs, warmup in sweep["epochs"]:
            for decay in TRANSFER_DECAYS:
                r = Recipe(
                    optimizer="sgd", momentum=0.9, base_lr=lr, lr_scaling=False, weight_decay=0.0,
                    batch_size=512, epochs=epochs, warmup_epochs=warmup, layerwise_decay=decay,
                )
                out.append(replace(r, **overrides))
    return out


@torch.no_grad()
def evaluate(model: nn.Module, data: ImageDataset, batch_size: int = 256) -> float:
    """Top-1 accuracy (percent) over the full split."""
    if len(data) == 0:
        return float("nan")
    model.eval()
    correct = 0
    for idx in batch_indices(len(data), batch_size):
        correct += (model(data.images[idx]).argmax(-1) == data.labels[idx]).sum().item()
    return 100.0 * correct / len(data)


def _make_optimizer(groups, recipe: Recipe):
    if recipe.optimizer == "adamw":
        return torch.optim.AdamW(groups, lr=recipe.peak_lr, betas=recipe.betas, weight_decay=recipe.weight_decay)
    return torch.optim.SGD(groups, lr=recipe.peak_lr, momentum=recipe.momentum, weight_decay=recipe.weight_decay)


class _Augment:
    def __init__(self, recipe: Recipe, generator: torch.Generator):
        self.recipe = recipe
        self.g = generator
        self.extra = None
        if recipe.randaug or recipe.color_jitter > 0:
            from torchvision.transforms import v2

            ops = []
            if recipe.randaug:
                ops.append(v2.RandAugment(num_ops=2, magnitude=10))
            if recipe.color_jitter > 0:
                cj = recipe.color_jitter
                ops.append(v2.ColorJitter(cj, cj, cj))
            self.extra = v2.Compose(ops)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        r = self.recipe
        if r.random_resized_crop or r.hflip:
            scale = r.crop_scale if r.random_resized_crop else (1.0, 1.0)
            ratio = (3 / 4, 4 / 3) if r.random_resized_crop else (1.0, 1.0)
            x = random_resized_crop_flip(x, self.g, scale=scale, ratio=ratio, flip=r.hflip)
        if self.extra is not None:
            # v2 ops expect [0, 1] images and draw from the global torch RNG
            x01 = (x * PIXEL_STD + PIXEL_MEAN).clamp(0, 1)
            x = (torch.stack([self.extra(im) for im in x01]) - PIXEL_MEAN) / PIXEL_STD
        return x


@dataclass
class FinetuneResult:
    final_top1: float
    best_top1: float
    init_top1: float
    curves: list[dict] = field(default_factory=list)


def finetune(model: VisionTransformer, data: Splits, recipe: Recipe, on_epoch: Callable[[dict], None] | None = None) -> FinetuneResult:
    """Tune every layer of ``model`` on ``data.train`` and track eval top-1.

    Parameter groups follow the layer-wise decay convention of
    :func:`mimlite.optim.layerwise_lr_groups`; lr is updated every step.
    """
    n_classes = len(data.classes)
    if model.head is None or model.head.out_features != n_classes:
        have = None if model.head is None else model.head.out_features
        raise ConfigError(f"model head has {have} outputs, dataset has {n_classes} classes")
    init_top1 = evaluate(model, data.eval)
    curves: list[dict] = []
    if recipe.epochs == 0:
        return FinetuneResult(init_top1, init_top1, init_top1, curves)

    groups = layerwise_lr_groups(model, recipe.peak_lr, recipe.layerwise_decay, recipe.weight_decay)
    for g in groups:
        g.pop("param_names")
    opt = _make_optimizer(groups, recipe)
    n = len(data.train)
    steps_per_epoch = math.ceil(n / recipe.batch_size)
    total = steps_per_epoch * recipe.epochs
    warmup = steps_per_epoch * recipe.warmup_epochs
    g = torch.Generator().manual_seed(recipe.seed)
    mix_rng = np.random.default_rng(recipe.seed)
    augment = _Augment(recipe, g)
    step = 0
    with seeded(recipe.seed):
        for epoch in range(1, recipe.epochs + 1):
            model.train()
            loss_sum, seen = 0.0, 0
            for idx in batch_indices(n, recipe.batch_size, g):
                lr = cosine_schedule(step, total, warmup, recipe.peak_lr, recipe.min_lr)
                set_lr(opt, lr)
                x, y = augment(data.train.images[idx]), data.train.labels[idx]
                if recipe.mixup_alpha > 0:
                    lam = float(mix_rng.beta(recipe.mixup_alpha, recipe.mixup_alpha))
                    x = lam * x + (1 - lam) * x.flip(0)
                    logits = model(x)
                    loss = lam * F.cross_entropy(logits, y, label_smoothing=recipe.label_smoothing) + (
                        1 - lam
                    ) * F.cross_entropy(logits, y.flip(0), label_smoothing=recipe.label_smoothing)
                else:
                    loss = F.cross_entropy(model(x), y, label_smoothing=recipe.label_smoothing)
                check_finite(loss, f"training loss at epoch {epoch} step {step}", images=x, labels=y)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                loss_sum += loss.item() * len(idx)
                seen += len(idx)
                step += 1
            row = {"epoch": epoch, "lr": lr, "train_loss": loss_sum / seen, "eval_top1": evaluate(model, data.eval)}
            curves.append(row)
            log.info("epoch %d lr %.3g loss %.4f top1 %.2f", epoch, lr, row["train_loss"], row["eval_top1"])
            if on_epoch is not None:
                on_epoch(row)
    tops = [r["eval_top1"] for r in curves]
    return FinetuneResult(tops[-1], max(tops), init_top1, curves)


def pooled_features(backbone: nn.Module, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """GAP of final-layer features for a ViT, or ``backbone(x)`` flattened otherwise."""
    backbone.eval()
    out = []
    with torch.no_grad():
        for idx in batch_indices(len(images), batch_size):
            x = images[idx]
            f = backbone.pooled(x) if hasattr(backbone, "pooled") else backbone(x)
            out.append(f.flatten(1))
    return torch.cat(out)


@dataclass(frozen=True)
class ProbeRecipe:
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 256
    epochs: int = 100
    warmup_epochs: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.warmup_epochs > self.epochs:
            raise ConfigError(f"warmup_epochs {self.warmup_epochs} > epochs {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeRecipe":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown probe keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ProbeResult:
    top1: float
    train_top1: float
    curves: list[dict] = field(default_factory=list)


def linear_probe(backbone: nn.Module, data: Splits, recipe: ProbeRecipe = ProbeRecipe()) -> ProbeResult:
    """Train a linear classifier on frozen, standardized GAP features.

    Features are extracted once without augmentation; the backbone is
    never put in train mode nor handed to the optimizer.
    """
    before = state_checksum(backbone)
    ftr = pooled_features(backbone, data.train.images)
    fev = pooled_features(backbone, data.eval.images)
    mean, std = ftr.mean(0), ftr.std(0, unbiased=False).clamp_min(1e-6)
    ftr, fev = (ftr - mean) / std, (fev - mean) / std
    n_classes = len(data.classes)
    with seeded(recipe.seed):
        clf = nn.Linear(ftr.shape[1], n_classes)
        nn.init.trunc_normal_(clf.weight, std=0.01)
        nn.init.zeros_(clf.bias)
    opt = torch.optim.SGD(clf.parameters(), lr=recipe.base_lr, momentum=recipe.momentum, weight_decay=recipe.weight_decay)
    g = torch.Generator().manual_seed(recipe.seed)
    n = len(ftr)
    spe = math.ceil(n / recipe.batch_size)
    total, warmup = spe * recipe.epochs, spe * recipe.warmup_epochs
    step = 0
    curves = []
    for epoch in range(1, recipe.epochs + 1):
        loss_sum = 0.0
        for idx in batch_indices(n, recipe.batch_size, g):
            set_lr(opt, cosine_schedule(step, total, warmup, recipe.base_lr))
            loss = F.cross_entropy(clf(ftr[idx]), data.train.labels[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            loss_sum += loss.item() * len(idx)
            step += 1
        curves.append({"epoch": epoch, "train_loss": loss_sum / n})
    with torch.no_grad():
        top1 = 100.0 * (clf(fev).argmax(-1) == data.eval.labels).float().mean().item()
        train_top1 = 100.0 * (clf(ftr).argmax(-1) == data.train.labels).float().mean().item()
    if state_checksum(backbone) != before:
        raise RuntimeError("backbone parameters changed during linear probing")
    return ProbeResult(top1, train_top1, curves)
