"""Teacher-to-student distillation during MAE pre-training.

Two targets are supported: attention maps, mixed across student heads by a
learnable ``M`` (teacher heads x student heads), and layer representations,
projected by a learnable ``N`` (student dim x teacher dim). Both losses are
plain mean-squared errors; the teacher side never receives gradients.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .mae import (
    MaskedAutoencoder,
    check_finite,
    mae_loss,
    random_mask,
    reconstruction_targets,
)
from .vit import ConfigError, VisionTransformer, seeded

TARGET_KINDS = ("attention", "representation")
ATTENTION_KINDS = ("scores", "probs")


@dataclass(frozen=True)
class DistillConfig:
    target_kind: str = "attention"
    teacher_layer: int = 12
    student_layer: int = 12
    loss_weight: float = 1.0
    attach_layer: int = 12
    teacher_checkpoint: str | None = None
    # pre-softmax scaled scores by default; "probs" distills softmax outputs
    attention_kind: str = "scores"

    def __post_init__(self):
        if self.target_kind not in TARGET_KINDS:
            raise ConfigError(f"target_kind must be one of {TARGET_KINDS}")
        if self.attention_kind not in ATTENTION_KINDS:
            raise ConfigError(f"attention_kind must be one of {ATTENTION_KINDS}")
        if self.loss_weight < 0:
            raise ConfigError(f"loss weight must be >= 0, got {self.loss_weight}")
        if min(self.teacher_layer, self.student_layer, self.attach_layer) < 1:
            raise ConfigError("layer indices are 1-based")

    def validate(self, teacher: VisionTransformer, student: VisionTransformer) -> None:
        tc, sc = teacher.config, student.config
        if not self.teacher_layer <= tc.depth:
            raise ConfigError(f"teacher_layer {self.teacher_layer} exceeds teacher depth {tc.depth}")
        if not self.student_layer <= sc.depth:
            raise ConfigError(f"student_layer {self.student_layer} exceeds student depth {sc.depth}")
        if not self.attach_layer <= sc.depth:
            raise ConfigError(f"attach_layer {self.attach_layer} exceeds student depth {sc.depth}")
        if tc.patch_size != sc.patch_size or tc.grid_size != sc.grid_size or tc.in_chans != sc.in_chans:
            raise ConfigError(
                f"teacher grid {tc.grid_size}x{tc.grid_size}/p{tc.patch_size} does not match "
                f"student grid {sc.grid_size}x{sc.grid_size}/p{sc.patch_size}"
            )

    def to_dict(self) -> dict:
        return asdict(self)


def d_mae(depth: int = 12, **kw) -> DistillConfig:
    """Attention distillation at the last layer, decoder on the last layer."""
    return DistillConfig(target_kind="attention", teacher_layer=depth, student_layer=depth, attach_layer=depth, **kw)


def d2_mae(depth: int = 12, attach_layer: int = 8, **kw) -> DistillConfig:
    """Decoupled variant: decoder reads an intermediate layer (8 of 12 by default)."""
    return DistillConfig(target_kind="attention", teacher_layer=depth, student_layer=depth, attach_layer=attach_layer, **kw)


def attn_distill_loss(a_teacher: torch.Tensor, a_student: torch.Tensor, head_map: torch.Tensor) -> torch.Tensor:
    """MSE between teacher maps and head-mixed student maps.

    Shapes: ``a_teacher`` ``(..., h, l, l)``, ``a_student`` ``(..., h', l, l)``,
    ``head_map`` ``(h, h')``.
    """
    h, hs = a_teacher.shape[-3], a_student.shape[-3]
    if a_teacher.shape[-2:] != a_student.shape[-2:]:
        raise ValueError(
            f"token count mismatch: teacher {tuple(a_teacher.shape[-2:])}, student {tuple(a_student.shape[-2:])}"
        )
    if tuple(head_map.shape) != (h, hs):
        raise ValueError(f"head map shape {tuple(head_map.shape)} != ({h}, {hs})")
    mixed = torch.einsum("ab,...bij->...aij", head_map, a_student)
    return ((a_teacher.detach() - mixed) ** 2).mean()


def rep_distill_loss(x_teacher: torch.Tensor, x_student: torch.Tensor, dim_map: torch.Tensor) -> torch.Tensor:
    """MSE between teacher features ``(..., l, d)`` and ``x_student @ dim_map``."""
    if x_teacher.shape[:-1] != x_student.shape[:-1]:
        raise ValueError(f"token count mismatch: {tuple(x_teacher.shape)} vs {tuple(x_student.shape)}")
    if tuple(dim_map.shape) != (x_student.shape[-1], x_teacher.shape[-1]):
        raise ValueError(
            f"dim map shape {tuple(dim_map.shape)} != ({x_student.shape[-1]}, {x_teacher.shape[-1]})"
        )
    return ((x_teacher.detach() - x_student @ dim_map) ** 2).mean()


class HeadMap(nn.Module):
    def __init__(self, teacher_heads: int, student_heads: int):
        super().__init__()
        if teacher_heads == student_heads:
            init = torch.eye(teacher_heads)
        else:
            init = torch.full((teacher_heads, student_heads), 1.0 / student_heads)
        self.weight = nn.Parameter(init)


class DimMap(nn.Module):
    def __init__(self, student_dim: int, teacher_dim: int, seed: int = 0):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(student_dim, teacher_dim))
        with seeded(seed):
            nn.init.trunc_normal_(self.weight, std=0.02, a=-0.04, b=0.04)


class Distiller(nn.Module):
    """Holds the learnable alignment matrix for one teacher/student layer pair."""

    def __init__(self, cfg: DistillConfig, teacher: VisionTransformer, student: VisionTransformer, seed: int = 0):
        super().__init__()
        cfg.validate(teacher, student)
        self.cfg = cfg
        if cfg.target_kind == "attention":
            self.mapping = HeadMap(teacher.config.num_heads, student.config.num_heads)
        else:
            self.mapping = DimMap(student.config.embed_dim, teacher.config.embed_dim, seed)

    @property
    def capture(self) -> str:
        return "attentions" if self.cfg.target_kind == "attention" else "features"

    def select(self, enc, layer: int) -> torch.Tensor:
        if self.cfg.target_kind == "representation":
            return enc.features[layer]
        record = enc.scores if self.cfg.attention_kind == "scores" else enc.probs
        return record.layer(layer)

    def forward(self, teacher_enc, student_enc) -> torch.Tensor:
        t = self.select(teacher_enc, self.cfg.teacher_layer)
        s = self.select(student_enc, self.cfg.student_layer)
        if t.shape[-2] != s.shape[-2]:
            raise ValueError(f"teacher saw {t.shape[-2]} tokens, student {s.shape[-2]}")
        if self.cfg.target_kind == "attention":
            return attn_distill_loss(t, s, self.mapping.weight)
        return rep_distill_loss(t, s, self.mapping.weight)


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def distilled_pretrain_step(
    mae: MaskedAutoencoder,
    teacher: VisionTransformer,
    distiller: Distiller,
    optimizer: torch.optim.Optimizer,
    images: torch.Tensor,
    ratio: float,
    rng,
    normalize_targets: bool = True,
) -> dict:
    """One joint step on ``recon_loss + weight * distill_loss``.

    The teacher sees exactly the student's visible patches and stays frozen.
    """
    if mae.wiring.recon_layer != distiller.cfg.attach_layer:
        raise ConfigError(
            f"autoencoder taps layer {mae.wiring.recon_layer}, distill config says {distiller.cfg.attach_layer}"
        )
    mae.train()
    teacher.eval()
    plan = random_mask(mae.encoder.config.num_patches, ratio, rng, batch_size=images.shape[0])
    pred, s_enc = mae(images, plan, capture=distiller.capture)
    with torch.no_grad():
        t_enc = teacher.forward_features(images, visible=plan.visible, capture=distiller.capture)
    targets = reconstruction_targets(images, plan, mae.patch_size, normalize_targets)
    recon = mae_loss(pred, targets, plan)
    dist = distiller(t_enc, s_enc)
    total = recon + distiller.cfg.loss_weight * dist
    check_finite(total, "distillation total loss", images=images, visible=plan.visible, recon=recon, distill=dist)
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return {
        "recon_loss": recon.item(),
        "distill_loss": dist.item(),
        "total": total.item(),
        "plan": plan,
        "encoder_tokens": s_enc.output.shape[1],
    }
