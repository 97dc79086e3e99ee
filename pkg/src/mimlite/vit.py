"""Vanilla ViT encoder with an instrumented forward pass.

The encoder processes patch tokens only (no class token), uses fixed 2-D
sine-cosine positional embeddings and pre-norm blocks. Blocks live in a
``ModuleDict`` keyed ``"1".."L"`` so parameter names read
``blocks.<i>.<submodule>.<param>`` with 1-based block indices.
"""

from __future__ import annotations

import contextlib
import hashlib
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

HEAD_KINDS = ("gap_classifier", "none")


class ConfigError(ValueError):
    """Raised when a model/decoder configuration violates its invariants."""


class CaptureError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 224
    patch_size: int = 16
    depth: int = 12
    embed_dim: int = 192
    num_heads: int = 12
    mlp_ratio: float = 4.0
    in_chans: int = 3
    num_classes: int = 1000
    use_class_token: bool = False
    head_kind: str = "gap_classifier"

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.num_heads < 1 or self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.use_class_token:
            raise ConfigError("class-token pathways are not supported; use GAP")
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"head_kind must be one of {HEAD_KINDS}, got {self.head_kind!r}")
        if self.head_kind == "gap_classifier" and self.num_classes < 1:
            raise ConfigError("gap_classifier head needs num_classes >= 1")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.in_chans

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def vit_tiny(**overrides) -> ModelConfig:
    """ViT-Tiny with 12 heads instead of DeiT's 3."""
    base = dict(image_size=224, patch_size=16, depth=12, embed_dim=192, num_heads=12)
    base.update(overrides)
    return ModelConfig(**base)


def vit_base(**overrides) -> ModelConfig:
    base = dict(image_size=224, patch_size=16, depth=12, embed_dim=768, num_heads=12)
    base.update(overrides)
    return ModelConfig(**base)


def vit_toy(**overrides) -> ModelConfig:
    """Desk-scale model for 32x32 inputs: 8x8 grid of 4x4 patches."""
    base = dict(image_size=32, patch_size=4, depth=6, embed_dim=64, num_heads=4, num_classes=10)
    base.update(overrides)
    return ModelConfig(**base)


PRESETS = {"vit_tiny": vit_tiny, "vit_base": vit_base, "vit_toy": vit_toy}


@dataclass(frozen=True)
class TokenGrid:
    rows: int
    cols: int
    token_dim: int
    class_token_present: bool = False

    @property
    def num_tokens(self) -> int:
        return self.rows * self.cols + int(self.class_token_present)

    @classmethod
    def for_image(cls, height: int, width: int, patch_size: int, channels: int = 3) -> "TokenGrid":
        if height % patch_size or width % patch_size:
            raise ValueError(
                f"image {height}x{width} not divisible by patch size {patch_size}"
            )
        return cls(height // patch_size, width // patch_size, patch_size**2 * channels)

    @classmethod
    def for_config(cls, config: ModelConfig) -> "TokenGrid":
        return cls.for_image(config.image_size, config.image_size, config.patch_size, config.in_chans)

    def coordinates(self) -> torch.Tensor:
        """(rows*cols, 2) row-major (row, col) coordinates of patch tokens."""
        r, c = torch.meshgrid(torch.arange(self.rows), torch.arange(self.cols), indexing="ij")
        return torch.stack([r.flatten(), c.flatten()], dim=-1).to(torch.float64)


def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Split images into flattened patches.

    Args:
        images: ``(C, H, W)`` or ``(B, C, H, W)``.
        patch_size: side of a square patch in pixels.

    Returns:
        ``(l, p*p*C)`` or ``(B, l, p*p*C)`` with tokens in row-major grid order
        and pixels inside a patch ordered ``(row, col, channel)``.
    """
    squeeze = images.dim() == 3
    if squeeze:
        images = images.unsqueeze(0)
    if images.dim() != 4:
        raise ValueError(f"expected (B, C, H, W) images, got shape {tuple(images.shape)}")
    b, c, h, w = images.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
    x = images.reshape(b, c, h // p, p, w // p, p)
    x = torch.einsum("bchpwq->bhwpqc", x)
    x = x.reshape(b, (h // p) * (w // p), p * p * c)
    return x[0] if squeeze else x


def unpatchify(tokens: torch.Tensor, grid: TokenGrid, patch_size: int) -> torch.Tensor:
    """Inverse of :func:`patchify` for a known grid."""
    squeeze = tokens.dim() == 2
    if squeeze:
        tokens = tokens.unsqueeze(0)
    b, n, dim = tokens.shape
    if n != grid.rows * grid.cols:
        raise ValueError(f"{n} tokens do not match a {grid.rows}x{grid.cols} grid")
    p = patch_size
    if dim % (p * p):
        raise ValueError(f"token dim {dim} incompatible with patch size {p}")
    c = dim // (p * p)
    x = tokens.reshape(b, grid.rows, grid.cols, p, p, c)
    x = torch.einsum("bhwpqc->bchpwq", x)
    x = x.reshape(b, c, grid.rows * p, grid.cols * p)
    return x[0] if squeeze else x


def sincos_pos_embed(embed_dim: int, rows: int, cols: int | None = None) -> torch.Tensor:
    """Fixed 2-D sine-cosine embedding, shape ``(rows*cols, embed_dim)``.

    Half the channels encode the row coordinate and half the column, each
    with the usual 1/10000^(2i/d) frequency ladder.
    """
    cols = rows if cols is None else cols
    if embed_dim % 4:
        raise ConfigError(f"sin-cos embedding needs embed_dim divisible by 4, got {embed_dim}")
    gh, gw = np.meshgrid(np.arange(rows, dtype=np.float64), np.arange(cols, dtype=np.float64), indexing="ij")

    def _1d(dim, pos):
        omega = np.arange(dim // 2, dtype=np.float64) / (dim / 2.0)
        omega = 1.0 / 10000**omega
        out = np.einsum("m,d->md", pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    emb = np.concatenate([_1d(embed_dim // 2, gh), _1d(embed_dim // 2, gw)], axis=1)
    return torch.from_numpy(emb).float()


@dataclass
class FeatureRecord:
    """Normalized per-layer representations.

    ``layers[0]`` is the normalized patch embedding (first LN of block 1),
    ``layers[k]`` for ``1 <= k < L`` is the first LN of block ``k+1`` and
    ``layers[L]`` is the final LN output. Each entry is ``(B, l, dim)``.
    """

    layers: list[torch.Tensor]

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, k: int) -> torch.Tensor:
        return self.layers[k]


@dataclass
class AttentionRecord:
    """Per-block attention tensors, ``maps[k-1]`` belongs to block ``k``.

    Each entry is ``(B, h, l, l)`` indexed ``[..., query, key]``.
    """

    maps: list[torch.Tensor]
    pre_softmax: bool

    def __len__(self):
        return len(self.maps)

    def layer(self, k: int) -> torch.Tensor:
        if not 1 <= k <= len(self.maps):
            raise IndexError(f"attention layer {k} outside 1..{len(self.maps)}")
        return self.maps[k - 1]


@dataclass
class EncoderOutput:
    output: torch.Tensor
    hidden: list[torch.Tensor]
    features: FeatureRecord | None = None
    scores: AttentionRecord | None = None
    probs: AttentionRecord | None = None


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim**-0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        scores = (q @ k.transpose(-2, -1)) * self.scale
        probs = scores.softmax(dim=-1)
        out = (probs @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out), scores, probs


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        normed = self.norm1(x)
        a, scores, probs = self.attn(normed)
        x = x + a
        x = x + self.mlp(self.norm2(x))
        return x, normed, scores, probs


class PatchEmbed(nn.Module):
    """Linear projection of flattened patches (equivalent to a stride-p conv)."""

    def __init__(self, patch_dim: int, embed_dim: int):
        super().__init__()
        self.proj = nn.Linear(patch_dim, embed_dim)

    def forward(self, tokens):
        return self.proj(tokens)


def init_weights(module: nn.Module) -> None:
    """Truncated-normal(0.02) weights, zero biases, unit LayerNorm scales."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


@contextlib.contextmanager
def seeded(seed: int):
    """Run a block under ``torch.manual_seed(seed)`` without leaking global RNG state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def _check_visible(visible: torch.Tensor, batch: int, num_tokens: int) -> torch.Tensor:
    if visible.dim() == 1:
        visible = visible.unsqueeze(0).expand(batch, -1)
    if visible.dim() != 2 or visible.shape[0] != batch:
        raise ValueError(f"visible index tensor has shape {tuple(visible.shape)} for batch {batch}")
    if visible.numel() and (visible.min() < 0 or visible.max() >= num_tokens):
        raise IndexError(f"visible indices outside 0..{num_tokens - 1}")
    return visible.long()


def gather_tokens(x: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    """Select ``index`` (B, k) rows from ``x`` (B, l, d)."""
    return torch.gather(x, 1, index.unsqueeze(-1).expand(-1, -1, x.shape[-1]))


class VisionTransformer(nn.Module):
    def __init__(self, config: ModelConfig, instrumented: bool = True):
        super().__init__()
        self.config = config
        self.instrumented = instrumented
        d = config.embed_dim
        self.patch_embed = PatchEmbed(config.patch_dim, d)
        self.register_buffer("pos_embed", sincos_pos_embed(d, config.grid_size))
        self.blocks = nn.ModuleDict(
            {str(i): Block(d, config.num_heads, config.mlp_ratio) for i in range(1, config.depth + 1)}
        )
        self.final_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.num_classes) if config.head_kind == "gap_classifier" else None
        init_weights(self)

    @property
    def depth(self) -> int:
        return self.config.depth

    @property
    def grid(self) -> TokenGrid:
        return TokenGrid.for_config(self.config)

    def block(self, i: int) -> Block:
        return self.blocks[str(i)]

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def embed(self, tokens: torch.Tensor, visible: torch.Tensor | None = None) -> torch.Tensor:
        """Patch embedding plus positional embedding, optionally keeping only ``visible``."""
        if tokens.shape[1] != self.config.num_patches:
            raise ValueError(f"expected {self.config.num_patches} tokens, got {tokens.shape[1]}")
        if visible is not None:
            visible = _check_visible(visible, tokens.shape[0], tokens.shape[1])
            tokens = gather_tokens(tokens, visible)
            pos = self.pos_embed[visible]
        else:
            pos = self.pos_embed.unsqueeze(0)
        return self.patch_embed(tokens) + pos

    def forward_tokens(
        self,
        tokens: torch.Tensor,
        visible: torch.Tensor | None = None,
        capture: Iterable[str] | str = (),
    ) -> EncoderOutput:
        capture = {capture} if isinstance(capture, str) else set(capture)
        capture.discard("none")
        if capture - {"features", "attentions"}:
            raise ValueError(f"unknown capture kinds {capture - {'features', 'attentions'}}")
        if capture and not self.instrumented:
            raise CaptureError("model was built without instrumentation hooks")
        x = self.embed(tokens, visible)
        hidden = [x]
        normed, scores, probs = [], [], []
        for blk in self.blocks.values():
            x, n, s, p = blk(x)
            hidden.append(x)
            normed.append(n)
            scores.append(s)
            probs.append(p)
        out = self.final_norm(x)
        result = EncoderOutput(output=out, hidden=hidden)
        if "features" in capture:
            result.features = FeatureRecord(normed + [out])
        if "attentions" in capture:
            result.scores = AttentionRecord(scores, pre_softmax=True)
            result.probs = AttentionRecord(probs, pre_softmax=False)
        return result

    def forward_features(self, images: torch.Tensor, visible=None, capture=()) -> EncoderOutput:
        return self.forward_tokens(patchify(images, self.config.patch_size), visible, capture)

    def pooled(self, images: torch.Tensor) -> torch.Tensor:
        """GAP over the final normalized patch tokens, ``(B, dim)``."""
        return self.forward_features(images).output.mean(dim=1)

    def classify_features(self, features: torch.Tensor) -> torch.Tensor:
        if self.head is None:
            raise RuntimeError("model has no classification head (head_kind='none')")
        return self.head(features.mean(dim=1))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.classify_features(self.forward_features(images).output)


def build_model(config: ModelConfig, seed: int = 0, instrumented: bool = True) -> VisionTransformer:
    with seeded(seed):
        return VisionTransformer(config, instrumented=instrumented)


def encoder_forward(model: VisionTransformer, tokens: torch.Tensor, token_mask=None, capture="none"):
    """Return ``(output, FeatureRecord | None, AttentionRecord | None)``.

    The attention record holds post-softmax probabilities; use
    ``model.forward_tokens`` directly to get the pre-softmax scores as well.
    """
    res = model.forward_tokens(tokens, token_mask, capture)
    return res.output, res.features, res.probs


def classification_head_forward(model: VisionTransformer, tokens: torch.Tensor) -> torch.Tensor:
    """Logits from patch tokens ``(B, l, p*p*C)``."""
    if model.head is None:
        raise RuntimeError("model has no classification head (head_kind='none')")
    return model.classify_features(model.forward_tokens(tokens).output)


def state_checksum(tensors: dict[str, torch.Tensor] | nn.Module, prefix: str | Sequence[str] = "") -> str:
    """SHA-256 over names and raw bytes of parameters (optionally filtered by prefix)."""
    if isinstance(tensors, nn.Module):
        tensors = tensors.state_dict()
    prefixes = (prefix,) if isinstance(prefix, str) else tuple(prefix)
    h = hashlib.sha256()
    for name in sorted(tensors):
        if not name.startswith(prefixes):
            continue
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()
