"""Layer similarity (minibatch CKA) and attention-map statistics."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import torch

from .vit import TokenGrid, VisionTransformer, build_model

log = logging.getLogger(__name__)

DEGENERATE_EPS = 1e-12
CKA_MODES = ("example", "token")


class DegenerateCKAWarning(RuntimeWarning):
    pass


def gram(x: torch.Tensor) -> torch.Tensor:
    """Linear kernel over rows; ``x`` is ``(n, ...)`` and gets flattened per row."""
    x = x.reshape(x.shape[0], -1).to(torch.float64)
    return x @ x.T


def hsic_unbiased(k: torch.Tensor, l: torch.Tensor) -> torch.Tensor:
    """Unbiased HSIC estimate from two ``(n, n)`` Gram matrices, n >= 4.

    Diagonals are zeroed before combining the trace, the product of sums and
    the row-sum cross term. The estimate can be negative on finite samples.
    """
    n = k.shape[0]
    if k.shape != (n, n) or l.shape != (n, n):
        raise ValueError(f"Gram matrices must be square and equal-sized, got {tuple(k.shape)}, {tuple(l.shape)}")
    if n < 4:
        raise ValueError(f"unbiased HSIC needs n >= 4 examples, got {n}")
    k = k.to(torch.float64).clone()
    l = l.to(torch.float64).clone()
    k.fill_diagonal_(0)
    l.fill_diagonal_(0)
    trace = (k * l.T).sum()
    sums = k.sum() * l.sum() / ((n - 1) * (n - 2))
    cross = (k.sum(0) @ l.sum(1)) * 2 / (n - 2)
    return (trace + sums - cross) / (n * (n - 3))


def _ratio(xy: float, xx: float, yy: float) -> float:
    if xx <= DEGENERATE_EPS or yy <= DEGENERATE_EPS:
        warnings.warn(
            f"degenerate CKA: self-similarity terms {xx:.3g}, {yy:.3g}; reporting 0", DegenerateCKAWarning, stacklevel=3
        )
        return 0.0
    return min(1.0, max(0.0, xy / math.sqrt(xx * yy)))


def cka(xs: torch.Tensor | Sequence[torch.Tensor], ys: torch.Tensor | Sequence[torch.Tensor]) -> float:
    """Minibatch CKA between two feature streams.

    ``xs`` and ``ys`` are either single ``(n, ...)`` tensors or equally long
    sequences of minibatches. The three HSIC terms are averaged over batches
    before the normalized ratio is formed; the result is clamped to [0, 1].
    """
    if torch.is_tensor(xs):
        xs = [xs]
    if torch.is_tensor(ys):
        ys = [ys]
    if len(xs) != len(ys):
        raise ValueError(f"{len(xs)} X batches vs {len(ys)} Y batches")
    xy = xx = yy = 0.0
    for x, y in zip(xs, ys):
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"batch size mismatch: {x.shape[0]} vs {y.shape[0]}")
        kx, ky = gram(x), gram(y)
        xy += hsic_unbiased(kx, ky).item()
        xx += hsic_unbiased(kx, kx).item()
        yy += hsic_unbiased(ky, ky).item()
    b = len(xs)
    return _ratio(xy / b, xx / b, yy / b)


class MinibatchCKA:
    """Accumulates HSIC terms for every (layer_a, layer_b) pair across batches."""

    def __init__(self, n_a: int, n_b: int):
        self.xy = torch.zeros(n_a, n_b, dtype=torch.float64)
        self.xx = torch.zeros(n_a, dtype=torch.float64)
        self.yy = torch.zeros(n_b, dtype=torch.float64)
        self.batches = 0

    def update(self, feats_a: Sequence[torch.Tensor], feats_b: Sequence[torch.Tensor]) -> None:
        ka = [gram(f) for f in feats_a]
        kb = [gram(f) for f in feats_b]
        for i, k in enumerate(ka):
            self.xx[i] += hsic_unbiased(k, k)
            for j, l in enumerate(kb):
                self.xy[i, j] += hsic_unbiased(k, l)
        for j, l in enumerate(kb):
            self.yy[j] += hsic_unbiased(l, l)
        self.batches += 1

    def compute(self) -> torch.Tensor:
        if self.batches == 0:
            raise ValueError("no batches accumulated")
        out = torch.zeros_like(self.xy)
        for i in range(out.shape[0]):
            for j in range(out.shape[1]):
                out[i, j] = _ratio(self.xy[i, j].item(), self.xx[i].item(), self.yy[j].item())
        return out


@dataclass
class SimilarityMatrix:
    values: torch.Tensor
    model_a: str
    model_b: str
    batches: int

    @property
    def shape(self):
        return tuple(self.values.shape)


def _layer_features(model: VisionTransformer, images: torch.Tensor, mode: str) -> list[torch.Tensor]:
    feats = model.forward_features(images, capture="features").features.layers
    if mode == "example":
        return [f.reshape(f.shape[0], -1) for f in feats]
    return [f.reshape(-1, f.shape[-1]) for f in feats]


@torch.no_grad()
def layer_similarity_matrix(
    model_a: VisionTransformer,
    model_b: VisionTransformer,
    images: torch.Tensor,
    batch_size: int = 64,
    num_batches: int | None = 16,
    mode: str = "example",
    names: tuple[str, str] = ("model_a", "model_b"),
) -> SimilarityMatrix:
    """CKA between every captured layer of two models (index 0 = patch embedding).

    ``mode="example"`` flattens all tokens of an image into one feature
    vector; ``mode="token"`` treats every token as an example.
    """
    if mode not in CKA_MODES:
        raise ValueError(f"mode must be one of {CKA_MODES}")
    if len(images) == 0:
        raise ValueError("empty dataset")
    if min(batch_size, len(images)) < 4:
        raise ValueError("CKA batches need at least 4 images")
    model_a.eval()
    model_b.eval()
    acc = MinibatchCKA(model_a.depth + 1, model_b.depth + 1)
    for start in range(0, len(images) - batch_size + 1, batch_size):
        if num_batches is not None and acc.batches >= num_batches:
            break
        x = images[start : start + batch_size]
        acc.update(_layer_features(model_a, x, mode), _layer_features(model_b, x, mode))
    if acc.batches == 0:
        raise ValueError(f"{len(images)} images do not fill one batch of {batch_size}")
    return SimilarityMatrix(acc.compute(), names[0], names[1], acc.batches)


def _distance_matrix(grid: TokenGrid) -> torch.Tensor:
    coords = grid.coordinates()
    return torch.cdist(coords, coords)


def _strip_class_token(attn: torch.Tensor, grid: TokenGrid) -> torch.Tensor:
    if not grid.class_token_present:
        return attn
    attn = attn[..., 1:, 1:]
    return attn / attn.sum(-1, keepdim=True).clamp_min(1e-12)


def attention_distance(attn: torch.Tensor, grid: TokenGrid) -> torch.Tensor:
    """Mean attention distance per head, in patch-grid units.

    ``attn`` holds post-softmax maps ``(..., h, l, l)`` indexed
    ``[query, key]``. Each query's distance is the probability-weighted mean
    of its Euclidean grid distance to every key; queries are then averaged.
    Leading batch dims are averaged too, giving a ``(h,)`` tensor.
    """
    if attn.shape[-1] != grid.num_tokens or attn.shape[-2] != grid.num_tokens:
        raise ValueError(f"attention over {attn.shape[-1]} tokens does not match grid with {grid.num_tokens}")
    attn = _strip_class_token(attn.to(torch.float64), grid)
    per_query = (attn * _distance_matrix(grid)).sum(-1)
    return per_query.mean(-1).reshape(-1, attn.shape[-3]).mean(0)


def attention_entropy(attn: torch.Tensor, tol: float = 1e-4) -> torch.Tensor:
    """Mean attention entropy per head in nats, with ``0 * log 0 = 0``."""
    attn = attn.to(torch.float64)
    row_sums = attn.sum(-1)
    if (attn < -tol).any() or (row_sums - 1).abs().max() > tol:
        raise ValueError("attention rows are not probability distributions")
    plogp = torch.where(attn > 0, attn * torch.log(attn.clamp_min(1e-300)), torch.zeros_like(attn))
    per_query = -plogp.sum(-1)
    return per_query.mean(-1).reshape(-1, attn.shape[-3]).mean(0)


@dataclass
class AttentionStats:
    """``distance[k-1, h]`` and ``entropy[k-1, h]`` for block k, head h."""

    distance: torch.Tensor
    entropy: torch.Tensor
    model: str = "model"

    @property
    def num_layers(self) -> int:
        return self.distance.shape[0]

    def rows(self) -> list[dict]:
        out = []
        for k in range(self.distance.shape[0]):
            for h in range(self.distance.shape[1]):
                out.append(
                    {"layer": k + 1, "head": h, "distance": self.distance[k, h].item(), "entropy": self.entropy[k, h].item()}
                )
        return out


@torch.no_grad()
def attention_stats(model: VisionTransformer, images: torch.Tensor, batch_size: int = 64, name: str = "model") -> AttentionStats:
    """Per-layer, per-head distance/entropy on full unmasked images in eval mode."""
    if len(images) == 0:
        raise ValueError("empty dataset")
    model.eval()
    grid = model.grid
    dist = torch.zeros(model.depth, model.config.num_heads, dtype=torch.float64)
    ent = torch.zeros_like(dist)
    total = 0
    for start in range(0, len(images), batch_size):
        x = images[start : start + batch_size]
        probs = model.forward_features(x, capture="attentions").probs
        for k, a in enumerate(probs.maps):
            dist[k] += attention_distance(a, grid) * len(x)
            ent[k] += attention_entropy(a) * len(x)
        total += len(x)
    return AttentionStats(dist / total, ent / total, name)


def reserve_leading_blocks(pretrained: VisionTransformer | dict, k: int, config=None, seed: int = 0) -> VisionTransformer:
    """Fresh model whose patch embedding and blocks 1..k come from ``pretrained``.

    Blocks k+1..L, the final norm and the head keep their fresh
    initialization drawn from ``seed``. ``k=0`` still copies the patch
    embedding.
    """
    state = pretrained.state_dict() if isinstance(pretrained, VisionTransformer) else pretrained
    if config is None:
        if not isinstance(pretrained, VisionTransformer):
            raise ValueError("config is required when passing a raw state dict")
        config = pretrained.config
    if not 0 <= k <= config.depth:
        raise ValueError(f"k={k} outside 0..{config.depth}")
    model = build_model(config, seed)
    own = model.state_dict()
    keep = ("patch_embed.", "pos_embed") + tuple(f"blocks.{i}." for i in range(1, k + 1))
    mismatched = []
    for name in own:
        if not name.startswith(keep):
            continue
        if name not in state:
            mismatched.append(f"{name}: missing from checkpoint")
        elif state[name].shape != own[name].shape:
            mismatched.append(f"{name}: checkpoint {tuple(state[name].shape)} vs config {tuple(own[name].shape)}")
    if mismatched:
        raise ValueError("checkpoint/config mismatch:\n  " + "\n  ".join(mismatched))
    with torch.no_grad():
        for name, t in own.items():
            if name.startswith(keep):
                t.copy_(state[name])
    return model
