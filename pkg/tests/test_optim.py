import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from mimlite.optim import cosine_schedule, decay_groups, effective_lr, layer_id, layerwise_lr_groups
from mimlite.vit import ModelConfig, build_model, vit_tiny


class TestEffectiveLr:
    def test_supervised_recipe_value(self):
        assert effective_lr(1e-3, 1024) == pytest.approx(4e-3, rel=1e-12)

    def test_reference_batch(self):
        assert effective_lr(1e-3, 256) == 1e-3

    def test_batch_zero(self):
        with pytest.raises(ValueError):
            effective_lr(1e-3, 0)


class TestLayerwiseGroups:
    def setup_method(self):
        self.model = build_model(vit_tiny())

    def test_group_count_and_coverage(self):
        groups = layerwise_lr_groups(self.model, 1.0, 0.75)
        assert len(groups) == 12 + 2
        ids = [id(p) for g in groups for p in g["params"]]
        assert len(ids) == len(set(ids))
        assert sum(p.numel() for g in groups for p in g["params"]) == self.model.num_parameters()

    def test_decay_exponents(self):
        lr = 4e-3
        groups = layerwise_lr_groups(self.model, lr, 0.75)
        assert groups[-1]["lr"] == lr
        assert groups[12]["lr"] == pytest.approx(0.75 * lr)
        assert groups[0]["lr"] == pytest.approx(lr * 0.75**13)
        assert all(n.startswith("blocks.12.") for n in groups[12]["param_names"])
        assert all(n.startswith("patch_embed.") for n in groups[0]["param_names"])
        assert {n.split(".")[0] for n in groups[-1]["param_names"]} == {"final_norm", "head"}

    def test_no_decay_is_uniform(self):
        groups = layerwise_lr_groups(self.model, 2e-3, 1.0)
        assert {g["lr"] for g in groups} == {2e-3}

    @pytest.mark.parametrize("decay", [0.0, 1.5, -0.5])
    def test_decay_range(self, decay):
        with pytest.raises(ValueError):
            layerwise_lr_groups(self.model, 1.0, decay)

    def test_unassigned_parameters_listed(self):
        model = build_model(ModelConfig(image_size=8, patch_size=4, depth=1, embed_dim=8, num_heads=2, num_classes=2))
        model.register_parameter("stray", torch.nn.Parameter(torch.zeros(1)))
        with pytest.raises(ValueError, match="stray"):
            layerwise_lr_groups(model, 1.0, 0.75)

    def test_layer_id(self):
        assert layer_id("patch_embed.proj.weight", 12) == 0
        assert layer_id("blocks.7.attn.qkv.bias", 12) == 7
        assert layer_id("head.weight", 12) == 13


def test_decay_groups_skip_norms_and_biases():
    model = build_model(ModelConfig(image_size=8, patch_size=4, depth=1, embed_dim=8, num_heads=2, num_classes=2))
    decayed, skipped = decay_groups(model.named_parameters(), 0.05)
    assert all(p.ndim >= 2 for p in decayed["params"])
    assert all(p.ndim <= 1 for p in skipped["params"])
    assert decayed["weight_decay"] == 0.05 and skipped["weight_decay"] == 0.0


class TestCosine:
    def test_endpoints(self):
        assert cosine_schedule(0, 100, 10, 1.0, 0.1) == 0.0
        assert cosine_schedule(10, 100, 10, 1.0, 0.1) == 1.0
        assert cosine_schedule(100, 100, 10, 1.0, 0.1) == pytest.approx(0.1, abs=1e-15)

    def test_midpoint(self):
        assert cosine_schedule(55, 100, 10, 1.0, 0.0) == pytest.approx(0.5)

    def test_continuous_at_warmup(self):
        eps_left = cosine_schedule(999_999, 2_000_000, 1_000_000, 1.0)
        eps_right = cosine_schedule(1_000_001, 2_000_000, 1_000_000, 1.0)
        assert abs(eps_left - 1.0) < 1e-5 and abs(eps_right - 1.0) < 1e-5

    def test_errors(self):
        with pytest.raises(ValueError):
            cosine_schedule(0, 10, 11, 1.0)
        with pytest.raises(ValueError):
            cosine_schedule(11, 10, 1, 1.0)

    @given(st.integers(1, 500), st.data())
    def test_bounded_and_monotone_after_warmup(self, total, data):
        warmup = data.draw(st.integers(0, total))
        lrs = [cosine_schedule(s, total, warmup, 1.0, 0.01) for s in range(total + 1)]
        assert all(0.0 <= v <= 1.0 + 1e-12 for v in lrs)
        tail = lrs[warmup:]
        assert all(a >= b - 1e-12 for a, b in zip(tail, tail[1:]))
        assert math.isclose(lrs[-1], 0.01 if total > warmup else 1.0, abs_tol=1e-12)
