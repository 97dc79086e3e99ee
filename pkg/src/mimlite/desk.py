"""Desk-scale experiment protocol: toy ViT on the builtin 32x32 digit corpus.

One CPU core runs a 50-epoch MAE pre-training in about a minute and a
half. The functions here are what the acceptance suite uses; they are
plain compositions of the public API and double as worked examples.
"""

from __future__ import annotations

from dataclasses import replace

from .analysis import attention_stats
from .data import DatasetSpec, Splits, ingest_dataset
from .distill import DistillConfig, Distiller, d_mae, freeze
from .mae import DecoderConfig, MaskedAutoencoder
from .pretrain import PretrainConfig, run_pretraining
from .train_eval import FinetuneResult, ProbeRecipe, ProbeResult, Recipe, finetune, linear_probe
from .vit import ModelConfig, VisionTransformer, build_model, vit_toy

DATA = DatasetSpec(kind="builtin_small", image_size=32, num_classes=10, num_samples=2500)
DATA_SEED = 0
MODEL = vit_toy()
# 2x wider teacher, same grid and depth
TEACHER = replace(MODEL, embed_dim=2 * MODEL.embed_dim)
TEACHER_SEED = 1000
DECODER = DecoderConfig(depth=1, embed_dim=32, num_heads=2)
TEACHER_DECODER = DecoderConfig(depth=1, embed_dim=64, num_heads=4)
# Raw-pixel targets: on this corpus per-patch normalization removes the
# glyph/background contrast the encoder should learn (see README).
PRETRAIN = PretrainConfig(
    epochs=50, batch_size=64, base_lr=4e-3, warmup_epochs=5, crop_scale=(0.5, 1.0), normalize_targets=False
)
FINETUNE = Recipe(
    base_lr=4e-3, batch_size=64, epochs=15, warmup_epochs=2, weight_decay=0.05, crop_scale=(0.6, 1.0), hflip=False
)
PROBE = ProbeRecipe()


def load_data() -> Splits:
    return ingest_dataset(DATA, DATA_SEED)


def pretrain_mae(data: Splits, seed: int, config: ModelConfig = MODEL, decoder: DecoderConfig = DECODER) -> VisionTransformer:
    """Plain MAE pre-training; returns the encoder."""
    encoder = build_model(config, seed)
    run_pretraining(MaskedAutoencoder(encoder, decoder, seed=seed), data.train.images, replace(PRETRAIN, seed=seed))
    return encoder


def pretrain_teacher(data: Splits, seed: int = TEACHER_SEED) -> VisionTransformer:
    return freeze(pretrain_mae(data, seed, TEACHER, TEACHER_DECODER))


def pretrain_distilled(
    data: Splits, seed: int, teacher: VisionTransformer, distill: DistillConfig | None = None
) -> tuple[VisionTransformer, list[dict]]:
    """MAE + attention distillation (last layer to last layer by default)."""
    distill = distill or d_mae(MODEL.depth)
    student = build_model(MODEL, seed)
    mae = MaskedAutoencoder(student, DECODER, attach_layer=distill.attach_layer, seed=seed)
    distiller = Distiller(distill, teacher, student, seed)
    history = run_pretraining(mae, data.train.images, replace(PRETRAIN, seed=seed), teacher=teacher, distiller=distiller)
    return student, history


def finetune_from(model: VisionTransformer | None, data: Splits, seed: int) -> tuple[VisionTransformer, FinetuneResult]:
    """Fine-tune a copy of ``model`` (``None`` trains from scratch)."""
    fresh = build_model(MODEL, seed)
    if model is not None:
        state = {k: v for k, v in model.state_dict().items() if not k.startswith("head.")}
        fresh.load_state_dict(state, strict=False)
    return fresh, finetune(fresh, data, replace(FINETUNE, seed=seed))


def probe(model: VisionTransformer, data: Splits) -> ProbeResult:
    return linear_probe(model, data, PROBE)


def last_layers_distance(model: VisionTransformer, data: Splits, layers: int = 2, num_images: int = 256) -> float:
    """Mean attention distance (grid units) over heads of the last ``layers`` blocks."""
    stats = attention_stats(model, data.eval.images[:num_images])
    return stats.distance.mean(1)[-layers:].mean().item()

