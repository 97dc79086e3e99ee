"""Masked image modeling, distillation and layer analysis for small vision transformers."""

__version__ = "0.1.0"

from .vit import ModelConfig, VisionTransformer, build_model, vit_base, vit_tiny, vit_toy
from .mae import DecoderConfig, MaskedAutoencoder, mae_loss, random_mask, reconstruction_targets
from .distill import DistillConfig, Distiller, attn_distill_loss, d2_mae, d_mae, rep_distill_loss
from .analysis import attention_distance, attention_entropy, cka, hsic_unbiased, layer_similarity_matrix
from .checkpoint import load_checkpoint, load_model, save_checkpoint

__all__ = [
    "ModelConfig",
    "VisionTransformer",
    "build_model",
    "vit_base",
    "vit_tiny",
    "vit_toy",
    "DecoderConfig",
    "MaskedAutoencoder",
    "mae_loss",
    "random_mask",
    "reconstruction_targets",
    "DistillConfig",
    "Distiller",
    "attn_distill_loss",
    "d2_mae",
    "d_mae",
    "rep_distill_loss",
    "attention_distance",
    "attention_entropy",
    "cka",
    "hsic_unbiased",
    "layer_similarity_matrix",
    "load_checkpoint",
    "load_model",
    "save_checkpoint",
]
