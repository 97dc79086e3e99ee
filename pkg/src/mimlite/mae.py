"""MAE pre-training: random masking, lightweight decoder, pixel reconstruction loss."""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass

import torch
import torch.nn as nn

from .vit import (
    Block,
    ConfigError,
    TokenGrid,
    VisionTransformer,
    gather_tokens,
    patchify,
    seeded,
    sincos_pos_embed,
)

NORM_EPS = 1e-6


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message if dump_path is None else f"{message} (inputs dumped to {dump_path})")
        self.dump_path = dump_path


@dataclass
class MaskPlan:
    """Per-image visible/masked token indices, each sorted ascending.

    ``visible`` is ``(B, n_visible)`` and ``masked`` is ``(B, l - n_visible)``.
    """

    visible: torch.Tensor
    masked: torch.Tensor
    ratio: float
    seed: int | None = None

    @property
    def num_tokens(self) -> int:
        return self.visible.shape[1] + self.masked.shape[1]

    @property
    def batch_size(self) -> int:
        return self.visible.shape[0]


def num_visible(num_tokens: int, ratio: float) -> int:
    return max(1, math.floor(num_tokens * (1 - ratio)))


def _as_generator(rng) -> torch.Generator:
    if isinstance(rng, torch.Generator):
        return rng
    g = torch.Generator()
    g.manual_seed(int(rng))
    return g


def random_mask(num_tokens: int, ratio: float, rng, batch_size: int = 1) -> MaskPlan:
    """Draw one uniform random permutation per image and keep its head visible.

    ``rng`` is a ``torch.Generator`` or an integer seed.
    """
    if not 0 <= ratio < 1:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    if num_tokens < 1:
        raise ValueError("need at least one token")
    seed = None if isinstance(rng, torch.Generator) else int(rng)
    g = _as_generator(rng)
    keep = num_visible(num_tokens, ratio)
    noise = torch.rand(batch_size, num_tokens, generator=g)
    order = torch.argsort(noise, dim=1)
    visible, _ = torch.sort(order[:, :keep], dim=1)
    masked, _ = torch.sort(order[:, keep:], dim=1)
    return MaskPlan(visible=visible, masked=masked, ratio=ratio, seed=seed)


def reconstruction_targets(images: torch.Tensor, plan: MaskPlan, patch_size: int, normalize: bool = True) -> torch.Tensor:
    """Pixels of the masked patches, ``(B, n_masked, p*p*C)``.

    With ``normalize`` each patch is shifted to zero mean and scaled by
    ``1/sqrt(max(var, 1e-6))`` using its own (population) statistics.
    """
    patches = patchify(images if images.dim() == 4 else images.unsqueeze(0), patch_size)
    target = gather_tokens(patches, plan.masked)
    if normalize:
        mean = target.mean(dim=-1, keepdim=True)
        var = target.var(dim=-1, unbiased=False, keepdim=True)
        target = (target - mean) / var.clamp_min(NORM_EPS).sqrt()
    return target


@dataclass(frozen=True)
class DecoderConfig:
    depth: int = 1
    embed_dim: int = 96
    num_heads: int = 3
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"decoder depth must be >= 1, got {self.depth}")
        if self.num_heads < 1 or self.embed_dim % self.num_heads:
            raise ConfigError(
                f"decoder embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )


class MAEDecoder(nn.Module):
    def __init__(self, config: DecoderConfig, encoder_dim: int, grid: TokenGrid):
        super().__init__()
        self.config = config
        self.grid = grid
        d = config.embed_dim
        self.embed = nn.Linear(encoder_dim, d)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, d))
        self.register_buffer("pos_embed", sincos_pos_embed(d, grid.rows, grid.cols))
        self.blocks = nn.ModuleList([Block(d, config.num_heads, config.mlp_ratio) for _ in range(config.depth)])
        self.norm = nn.LayerNorm(d)
        self.pred = nn.Linear(d, grid.token_dim)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04)
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.mask_token, std=0.02)

    def forward(self, encoded_visible: torch.Tensor, plan: MaskPlan) -> torch.Tensor:
        b, n_vis, _ = encoded_visible.shape
        l = self.grid.rows * self.grid.cols
        if plan.num_tokens != l:
            raise ValueError(f"mask plan covers {plan.num_tokens} tokens, grid has {l}")
        if n_vis != plan.visible.shape[1] or b != plan.batch_size:
            raise ValueError(
                f"encoded tokens {tuple(encoded_visible.shape[:2])} do not match plan "
                f"{tuple(plan.visible.shape)}"
            )
        x = self.embed(encoded_visible)
        full = self.mask_token.expand(b, l, -1).clone()
        full.scatter_(1, plan.visible.unsqueeze(-1).expand(-1, -1, x.shape[-1]), x)
        full = full + self.pos_embed.unsqueeze(0)
        for blk in self.blocks:
            full = blk(full)[0]
        return self.pred(self.norm(full))


def decoder_forward(decoder: MAEDecoder, encoded_visible: torch.Tensor, plan: MaskPlan, grid: TokenGrid | None = None) -> torch.Tensor:
    if grid is not None and grid != decoder.grid:
        raise ValueError(f"grid {grid} does not match decoder grid {decoder.grid}")
    return decoder(encoded_visible, plan)


def mae_loss(predictions: torch.Tensor, targets: torch.Tensor, plan: MaskPlan) -> torch.Tensor:
    """MSE over masked tokens and pixel channels only."""
    if plan.masked.shape[1] == 0:
        raise ValueError("reconstruction loss is undefined with no masked tokens")
    pred = gather_tokens(predictions, plan.masked)
    if pred.shape != targets.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} vs target shape {tuple(targets.shape)}")
    return ((pred - targets) ** 2).mean()


@dataclass(frozen=True)
class Wiring:
    """Which student layer feeds the reconstruction decoder."""

    depth: int
    recon_layer: int

    @property
    def decoupled(self) -> bool:
        return self.recon_layer < self.depth


def attach_decoder(student_depth: int, k: int) -> Wiring:
    if not 1 <= k <= student_depth:
        raise ValueError(f"decoder attach layer {k} outside 1..{student_depth}")
    return Wiring(student_depth, k)


class MaskedAutoencoder(nn.Module):
    """Encoder + decoder pair; the decoder reads the encoder's layer ``attach_layer``.

    At the last layer the decoder consumes the final-LN output, as in plain
    MAE. An intermediate tap goes through its own LayerNorm so that no
    parameter of blocks above the tap sits on the reconstruction path.
    """

    def __init__(self, encoder: VisionTransformer, decoder_config: DecoderConfig = DecoderConfig(), attach_layer: int | None = None, seed: int = 0):
        super().__init__()
        self.encoder = encoder
        self.wiring = attach_decoder(encoder.depth, encoder.depth if attach_layer is None else attach_layer)
        with seeded(seed + 1):
            self.decoder = MAEDecoder(decoder_config, encoder.config.embed_dim, encoder.grid)
        self.tap_norm = nn.LayerNorm(encoder.config.embed_dim) if self.wiring.decoupled else None

    @property
    def patch_size(self) -> int:
        return self.encoder.config.patch_size

    def reconstruction_input(self, enc) -> torch.Tensor:
        if self.tap_norm is None:
            return enc.output
        return self.tap_norm(enc.hidden[self.wiring.recon_layer])

    def forward(self, images: torch.Tensor, plan: MaskPlan, capture=()):
        enc = self.encoder.forward_features(images, visible=plan.visible, capture=capture)
        pred = self.decoder(self.reconstruction_input(enc), plan)
        return pred, enc


def check_finite(loss: torch.Tensor, what: str, dump_dir: str | None = None, **inputs) -> None:
    if torch.isfinite(loss).all():
        return
    dump_dir = dump_dir or os.environ.get("MIMLITE_DUMP_DIR") or tempfile.gettempdir()
    os.makedirs(dump_dir, exist_ok=True)
    fd, path = tempfile.mkstemp(prefix="nonfinite_", suffix=".pt", dir=dump_dir)
    os.close(fd)
    torch.save({k: v.detach().cpu() if torch.is_tensor(v) else v for k, v in inputs.items()}, path)
    raise NonFiniteLossError(f"non-finite {what}: {loss.item()}", path)


def pretrain_step(mae: MaskedAutoencoder, optimizer: torch.optim.Optimizer, images: torch.Tensor, ratio: float, rng, normalize_targets: bool = True) -> dict:
    """One optimizer step on the reconstruction loss.

    Returns ``{"recon_loss", "total", "plan", "encoder_tokens"}``.
    """
    mae.train()
    plan = random_mask(mae.encoder.config.num_patches, ratio, rng, batch_size=images.shape[0])
    pred, enc = mae(images, plan)
    targets = reconstruction_targets(images, plan, mae.patch_size, normalize_targets)
    loss = mae_loss(pred, targets, plan)
    check_finite(loss, "reconstruction loss", images=images, visible=plan.visible, masked=plan.masked)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return {
        "recon_loss": loss.item(),
        "total": loss.item(),
        "plan": plan,
        "encoder_tokens": enc.output.shape[1],
    }
