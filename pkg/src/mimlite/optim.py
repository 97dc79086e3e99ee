"""Learning-rate rules shared by pre-training and fine-tuning."""

from __future__ import annotations

import math
from typing import Iterable

import torch.nn as nn

from .vit import VisionTransformer


def effective_lr(base_lr: float, batch_size: int) -> float:
    """Linear scaling rule: ``base_lr * batch_size / 256``."""
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    return base_lr * batch_size / 256


def cosine_schedule(step: int, total_steps: int, warmup_steps: int, peak_lr: float, min_lr: float = 0.0) -> float:
    """Linear warmup to ``peak_lr`` followed by half-cosine decay to ``min_lr``."""
    if warmup_steps > total_steps:
        raise ValueError(f"warmup {warmup_steps} exceeds total {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside 0..{total_steps}")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return peak_lr
    t = (step - warmup_steps) / (total_steps - warmup_steps)
    return min_lr + (peak_lr - min_lr) * (1 + math.cos(math.pi * t)) / 2


def layer_id(name: str, depth: int) -> int:
    """0 for the patch embedding, i for block i, depth+1 for final norm and head."""
    if name.startswith(("patch_embed.", "pos_embed")):
        return 0
    if name.startswith("blocks."):
        return int(name.split(".")[1])
    if name.startswith(("final_norm.", "head.")):
        return depth + 1
    raise KeyError(name)


def layerwise_lr_groups(model: VisionTransformer, lr: float, decay: float, weight_decay: float = 0.0) -> list[dict]:
    """Parameter groups ordered patch embedding, blocks 1..L, head.

    Group ``i`` gets ``lr * decay ** (L + 1 - i)``, so the head trains at
    ``lr`` and the patch embedding at ``lr * decay ** (L + 1)``. Each group
    records ``lr_scale`` so a scheduler can rescale the peak.
    """
    if not 0 < decay <= 1:
        raise ValueError(f"layer-wise decay must be in (0, 1], got {decay}")
    depth = model.depth
    groups = [{"name": f"layer_{i}", "params": [], "param_names": []} for i in range(depth + 2)]
    unassigned = []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        try:
            gid = layer_id(name, depth)
        except (KeyError, ValueError):
            unassigned.append(name)
            continue
        groups[gid]["params"].append(p)
        groups[gid]["param_names"].append(name)
    if unassigned:
        raise ValueError(f"parameters not assigned to any lr group: {unassigned}")
    for i, g in enumerate(groups):
        g["lr_scale"] = decay ** (depth + 1 - i)
        g["lr"] = lr * g["lr_scale"]
        g["weight_decay"] = weight_decay
    return [g for g in groups if g["params"]]


def decay_groups(named_params: Iterable[tuple[str, nn.Parameter]], weight_decay: float, no_decay: Iterable[str] = ()) -> list[dict]:
    """Split into decayed / non-decayed groups.

    Biases, norm parameters, the mask token and anything whose name starts
    with one of ``no_decay`` skip weight decay.
    """
    no_decay = tuple(no_decay)
    decay, skip = [], []
    for name, p in named_params:
        if not p.requires_grad:
            continue
        if p.ndim <= 1 or name.endswith("mask_token") or (no_decay and name.startswith(no_decay)):
            skip.append(p)
        else:
            decay.append(p)
    return [
        {"params": decay, "weight_decay": weight_decay, "lr_scale": 1.0},
        {"params": skip, "weight_decay": 0.0, "lr_scale": 1.0},
    ]


def set_lr(optimizer, lr: float) -> None:
    for g in optimizer.param_groups:
        g["lr"] = lr * g.get("lr_scale", 1.0)
