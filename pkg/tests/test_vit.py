import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from mimlite.vit import (
    CaptureError,
    ConfigError,
    ModelConfig,
    TokenGrid,
    build_model,
    classification_head_forward,
    encoder_forward,
    patchify,
    state_checksum,
    unpatchify,
    vit_base,
    vit_tiny,
    vit_toy,
)

from oracles import vit_param_count

# frozen from oracles.vit_param_count
VIT_TINY_PARAMS = 5_679_400
TOY_HEADLESS_PARAMS = 2_152
DESK_TOY_PARAMS = 303_818


def _oracle(cfg: ModelConfig) -> int:
    classes = cfg.num_classes if cfg.head_kind == "gap_classifier" else None
    return vit_param_count(cfg.patch_size, cfg.in_chans, cfg.embed_dim, cfg.depth, cfg.mlp_ratio, classes)


class TestConfig:
    def test_tiny_preset_values(self):
        c = vit_tiny()
        assert (c.depth, c.embed_dim, c.num_heads, c.patch_size, c.image_size) == (12, 192, 12, 16, 224)

    def test_base_preset_values(self):
        c = vit_base()
        assert (c.depth, c.embed_dim, c.num_heads, c.patch_size) == (12, 768, 12, 16)

    @pytest.mark.parametrize(
        "kw",
        [
            dict(image_size=30, patch_size=16),
            dict(embed_dim=190, num_heads=12),
            dict(depth=0),
            dict(head_kind="cls"),
            dict(use_class_token=True),
        ],
    )
    def test_invalid_configs_rejected(self, kw):
        with pytest.raises(ConfigError):
            vit_tiny(**kw)

    def test_dict_round_trip(self):
        c = vit_toy(embed_dim=128)
        assert ModelConfig.from_dict(c.to_dict()) == c


class TestParameterCount:
    def test_oracle_frozen_values(self):
        assert _oracle(vit_tiny()) == VIT_TINY_PARAMS
        toy = ModelConfig(image_size=8, patch_size=4, depth=2, embed_dim=8, num_heads=2, head_kind="none")
        assert _oracle(toy) == TOY_HEADLESS_PARAMS
        assert _oracle(vit_toy()) == DESK_TOY_PARAMS

    def test_vit_tiny_is_about_5_7m(self):
        n = build_model(vit_tiny()).num_parameters()
        assert n == VIT_TINY_PARAMS
        assert round(n / 1e6, 1) == 5.7

    @pytest.mark.parametrize(
        "cfg",
        [
            ModelConfig(image_size=8, patch_size=4, depth=2, embed_dim=8, num_heads=2, head_kind="none"),
            ModelConfig(image_size=8, patch_size=4, depth=2, embed_dim=8, num_heads=2, num_classes=3),
            vit_toy(),
            vit_toy(embed_dim=128, mlp_ratio=2.0),
            ModelConfig(image_size=12, patch_size=6, depth=1, embed_dim=12, num_heads=3, in_chans=1, num_classes=2),
        ],
    )
    def test_matches_oracle(self, cfg):
        assert build_model(cfg).num_parameters() == _oracle(cfg)


class TestPatchify:
    def test_vit_tiny_shape(self):
        assert patchify(torch.zeros(3, 224, 224), 16).shape == (196, 768)

    def test_toy_shape(self):
        assert patchify(torch.zeros(3, 32, 32), 4).shape == (64, 48)

    def test_non_divisible_rejected(self):
        with pytest.raises(ValueError):
            patchify(torch.zeros(3, 30, 32), 16)

    def test_row_major_order(self):
        img = torch.zeros(1, 1, 4, 4)
        img[0, 0, 0, 2] = 1.0  # top-right patch of a 2x2 grid
        img[0, 0, 2, 0] = 2.0  # bottom-left patch
        tok = patchify(img, 2)
        assert tok[0, 1].sum() == 1.0 and tok[0, 2].sum() == 2.0

    @given(st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 2, 4]), st.integers(1, 3), st.integers(0, 2**31 - 1))
    def test_round_trip_bit_exact(self, rows, cols, p, c, seed):
        x = torch.randn(2, c, rows * p, cols * p, generator=torch.Generator().manual_seed(seed))
        grid = TokenGrid(rows, cols, p * p * c)
        assert torch.equal(unpatchify(patchify(x, p), grid, p), x)

    def test_round_trip_constant(self):
        x = torch.full((1, 3, 32, 32), 0.37)
        assert torch.equal(unpatchify(patchify(x, 4), TokenGrid(8, 8, 48), 4), x)

    def test_unpatchify_count_mismatch(self):
        with pytest.raises(ValueError):
            unpatchify(torch.zeros(1, 63, 48), TokenGrid(8, 8, 48), 4)


class TestForward:
    def test_seed_determinism(self, tiny_cfg):
        assert state_checksum(build_model(tiny_cfg, 3)) == state_checksum(build_model(tiny_cfg, 3))
        assert state_checksum(build_model(tiny_cfg, 3)) != state_checksum(build_model(tiny_cfg, 4))

    def test_feature_record_vit_tiny(self):
        m = build_model(vit_tiny()).eval()
        with torch.no_grad():
            out = m.forward_features(torch.randn(1, 3, 224, 224), capture="features")
        assert len(out.features) == 13
        assert all(f.shape == (1, 196, 192) for f in out.features.layers)

    def test_masked_forward_vit_tiny(self):
        m = build_model(vit_tiny()).eval()
        visible = torch.sort(torch.randperm(196, generator=torch.Generator().manual_seed(0))[:49]).values[None]
        with torch.no_grad():
            out = m.forward_features(torch.randn(1, 3, 224, 224), visible=visible, capture=("features", "attentions"))
        assert out.output.shape == (1, 49, 192)
        assert all(f.shape[1] == 49 for f in out.features.layers)
        assert all(a.shape == (1, 12, 49, 49) for a in out.probs.maps)

    def test_eval_forward_bitwise_deterministic(self, tiny_cfg, images16):
        m = build_model(tiny_cfg).eval()
        with torch.no_grad():
            a = m.forward_features(images16, capture="attentions")
            b = m.forward_features(images16, capture="attentions")
        assert torch.equal(a.output, b.output)
        assert all(torch.equal(x, y) for x, y in zip(a.probs.maps, b.probs.maps))

    def test_capture_points(self, tiny_cfg, images16):
        """Entry k is LN1 of block k+1; the last entry is the final LN."""
        m = build_model(tiny_cfg).eval()
        with torch.no_grad():
            out = m.forward_features(images16, capture="features")
            for k in range(tiny_cfg.depth):
                expect = m.block(k + 1).norm1(out.hidden[k])
                assert torch.equal(out.features[k], expect)
            assert torch.equal(out.features[tiny_cfg.depth], out.output)

    def test_attention_rows_stochastic(self, tiny_cfg, images16):
        m = build_model(tiny_cfg).eval()
        with torch.no_grad():
            out = m.forward_features(images16, capture="attentions")
        assert out.probs.pre_softmax is False and out.scores.pre_softmax is True
        for s, p in zip(out.scores.maps, out.probs.maps):
            assert torch.isfinite(s).all()
            assert (p.sum(-1) - 1).abs().max() < 1e-5
            assert torch.allclose(torch.softmax(s, -1), p)

    def test_masking_commutes_with_embedding(self, tiny_cfg, images16):
        m = build_model(tiny_cfg).eval()
        tokens = patchify(images16, 4)
        visible = torch.tensor([[0, 3, 7, 12]] * 4)
        full = m.embed(tokens)
        masked = m.embed(tokens, visible)
        assert torch.equal(masked, torch.gather(full, 1, visible[..., None].expand(-1, -1, full.shape[-1])))

    def test_mask_out_of_range(self, tiny_cfg, images16):
        m = build_model(tiny_cfg)
        with pytest.raises((ValueError, IndexError)):
            m.forward_features(images16, visible=torch.tensor([[0, 16]] * 4))

    def test_capture_without_instrumentation(self, tiny_cfg, images16):
        m = build_model(tiny_cfg, instrumented=False)
        with pytest.raises(CaptureError):
            m.forward_features(images16, capture="attentions")

    def test_encoder_forward_triple(self, tiny_cfg, images16):
        m = build_model(tiny_cfg).eval()
        out, feats, probs = encoder_forward(m, patchify(images16, 4), None, "none")
        assert out.shape == (4, 16, 16) and feats is None and probs is None


class TestHead:
    def test_constant_features(self, tiny_cfg):
        m = build_model(tiny_cfg)
        v = torch.randn(tiny_cfg.embed_dim)
        feats = v.expand(2, 16, -1)
        assert torch.allclose(m.classify_features(feats), m.head(v).expand(2, -1))

    def test_gap_permutation_invariant(self, tiny_cfg, images16):
        m = build_model(tiny_cfg).eval()
        with torch.no_grad():
            f = m.forward_features(images16).output
            perm = torch.randperm(16, generator=torch.Generator().manual_seed(1))
            assert torch.allclose(m.classify_features(f), m.classify_features(f[:, perm]), atol=1e-5)

    def test_hand_computed_logits(self):
        cfg = ModelConfig(image_size=4, patch_size=2, depth=1, embed_dim=4, num_heads=1, num_classes=2)
        m = build_model(cfg)
        with torch.no_grad():
            m.head.weight.copy_(torch.tensor([[1.0, 0, 0, 0], [0, -2.0, 0, 0]]))
            m.head.bias.copy_(torch.tensor([0.5, 0.0]))
        feats = torch.tensor([[[1.0, 2, 0, 0], [3, 4, 0, 0], [5, 6, 0, 0], [7, 8, 0, 0]]])
        # GAP = (4, 5, 0, 0) -> logits (4 + 0.5, -10)
        assert torch.allclose(m.classify_features(feats), torch.tensor([[4.5, -10.0]]))

    def test_head_absent(self, images16):
        cfg = ModelConfig(image_size=16, patch_size=4, depth=1, embed_dim=8, num_heads=2, head_kind="none")
        m = build_model(cfg)
        assert m.head is None
        with pytest.raises(RuntimeError):
            classification_head_forward(m, patchify(images16, 4))

    def test_head_forward_matches_model_call(self, tiny_cfg, images16):
        m = build_model(tiny_cfg).eval()
        with torch.no_grad():
            assert torch.equal(classification_head_forward(m, patchify(images16, 4)), m(images16))


def test_sincos_is_fixed_buffer(tiny_cfg):
    m = build_model(tiny_cfg)
    names = {n for n, _ in m.named_parameters()}
    assert "pos_embed" not in names and "pos_embed" in m.state_dict()
    assert not math.isnan(m.pos_embed.sum().item())


def test_parameter_names_are_one_based(tiny_cfg):
    names = [n for n, _ in build_model(tiny_cfg).named_parameters()]
    assert any(n.startswith("blocks.1.") for n in names)
    assert any(n.startswith(f"blocks.{tiny_cfg.depth}.") for n in names)
    assert not any(n.startswith("blocks.0.") for n in names)
