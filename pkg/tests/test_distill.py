import pytest
import torch

from mimlite.distill import (
    DistillConfig,
    Distiller,
    attn_distill_loss,
    d2_mae,
    d_mae,
    distilled_pretrain_step,
    freeze,
    rep_distill_loss,
)
from mimlite.mae import DecoderConfig, MaskedAutoencoder, attach_decoder, mae_loss, random_mask, reconstruction_targets
from mimlite.pretrain import PretrainConfig, run_pretraining
from mimlite.vit import ConfigError, ModelConfig, build_model, state_checksum

from oracles import attn_distill_loop, central_difference, rep_distill_loop


def _cfg(depth=2, dim=16, heads=2, image=16):
    return ModelConfig(image_size=image, patch_size=4, depth=depth, embed_dim=dim, num_heads=heads, head_kind="none")


def _rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def _rel_err(a, b):
    return ((a - b).norm() / b.norm()).item()


class TestAttentionLoss:
    def test_identity_map_zero(self):
        a = _rand(3, 5, 5)
        assert attn_distill_loss(a, a.clone(), torch.eye(3, dtype=torch.float64)).item() == 0.0

    def test_exact_linear_match(self):
        a_s = torch.ones(1, 2, 2)
        a_t = torch.full((2, 2, 2), 0.5)
        assert attn_distill_loss(a_t, a_s, torch.tensor([[0.5], [0.5]])).item() == 0.0

    def test_triple_loop_oracle(self):
        a_t, a_s, m = _rand(2, 4, 4, seed=1), _rand(3, 4, 4, seed=2), _rand(2, 3, seed=3)
        want = attn_distill_loop(a_t.tolist(), a_s.tolist(), m.tolist())
        assert abs(attn_distill_loss(a_t, a_s, m).item() - want) < 1e-6

    def test_batched_equals_mean_of_singles(self):
        a_t, a_s, m = _rand(4, 2, 4, 4, seed=1), _rand(4, 3, 4, 4, seed=2), _rand(2, 3, seed=3)
        singles = torch.stack([attn_distill_loss(a_t[i], a_s[i], m) for i in range(4)])
        assert torch.allclose(attn_distill_loss(a_t, a_s, m), singles.mean())

    def test_mismatches(self):
        with pytest.raises(ValueError):
            attn_distill_loss(_rand(2, 4, 4), _rand(3, 5, 5), _rand(2, 3))
        with pytest.raises(ValueError):
            attn_distill_loss(_rand(2, 4, 4), _rand(3, 4, 4), _rand(3, 2))

    def test_gradients(self):
        a_t, a_s, m = _rand(2, 4, 4, seed=1), _rand(3, 4, 4, seed=2), _rand(2, 3, seed=3)
        a_t.requires_grad_(True)
        s = a_s.clone().requires_grad_(True)
        mm = m.clone().requires_grad_(True)
        attn_distill_loss(a_t, s, mm).backward()
        assert a_t.grad is None
        assert _rel_err(s.grad, central_difference(lambda x: attn_distill_loss(a_t, x, m), a_s.clone())) < 1e-4
        assert _rel_err(mm.grad, central_difference(lambda x: attn_distill_loss(a_t, a_s, x), m.clone())) < 1e-4


class TestRepresentationLoss:
    def test_exact_projection_zero(self):
        x_s, n = _rand(4, 3), _rand(3, 5, seed=1)
        assert rep_distill_loss(x_s @ n, x_s, n).item() == 0.0

    def test_constant_shift(self):
        x_s = _rand(4, 3)
        loss = rep_distill_loss(x_s + 0.3, x_s, torch.eye(3, dtype=torch.float64))
        assert loss.item() == pytest.approx(0.09, abs=1e-12)

    def test_flat_loop_oracle(self):
        x_t, x_s, n = _rand(4, 5, seed=1), _rand(4, 3, seed=2), _rand(3, 5, seed=3)
        want = rep_distill_loop(x_t.tolist(), x_s.tolist(), n.tolist())
        assert abs(rep_distill_loss(x_t, x_s, n).item() - want) < 1e-6

    def test_mismatches(self):
        with pytest.raises(ValueError):
            rep_distill_loss(_rand(4, 5), _rand(3, 3), _rand(3, 5))
        with pytest.raises(ValueError):
            rep_distill_loss(_rand(4, 5), _rand(4, 3), _rand(5, 3))

    def test_gradients(self):
        x_t, x_s, n = _rand(4, 5, seed=1), _rand(4, 3, seed=2), _rand(3, 5, seed=3)
        s = x_s.clone().requires_grad_(True)
        nn_ = n.clone().requires_grad_(True)
        rep_distill_loss(x_t, s, nn_).backward()
        assert _rel_err(s.grad, central_difference(lambda x: rep_distill_loss(x_t, x, n), x_s.clone())) < 1e-4
        assert _rel_err(nn_.grad, central_difference(lambda x: rep_distill_loss(x_t, x_s, x), n.clone())) < 1e-4


class TestConfig:
    def test_presets(self):
        assert (d_mae().teacher_layer, d_mae().student_layer, d_mae().attach_layer) == (12, 12, 12)
        d2 = d2_mae()
        assert (d2.target_kind, d2.teacher_layer, d2.student_layer, d2.attach_layer) == ("attention", 12, 12, 8)

    @pytest.mark.parametrize("kw", [dict(loss_weight=-1.0), dict(target_kind="logits"), dict(attach_layer=0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            DistillConfig(**kw)

    def test_attach_bounds(self):
        assert attach_decoder(12, 12).decoupled is False
        assert attach_decoder(12, 8).recon_layer == 8
        for k in (0, 13):
            with pytest.raises(ValueError):
                attach_decoder(12, k)

    def test_validate_against_models(self):
        s, t = build_model(_cfg()), build_model(_cfg(dim=32))
        with pytest.raises(ConfigError):
            Distiller(DistillConfig(teacher_layer=3, student_layer=2, attach_layer=2), t, s)
        with pytest.raises(ConfigError):
            Distiller(d_mae(2), build_model(_cfg(image=32)), s)

    def test_head_map_init(self):
        s = build_model(_cfg(heads=2))
        assert torch.equal(Distiller(d_mae(2), build_model(_cfg(dim=32, heads=2)), s).mapping.weight, torch.eye(2))
        w = Distiller(d_mae(2), build_model(_cfg(dim=32, heads=4)), s).mapping.weight
        assert w.shape == (4, 2) and torch.all(w == 0.5)


def _setup(depth=2, attach=None, weight=1.0, seed=0, kind="attention"):
    student = build_model(_cfg(depth=depth), seed)
    teacher = freeze(build_model(_cfg(depth=depth, dim=32, heads=4), 100))
    attach = depth if attach is None else attach
    cfg = DistillConfig(kind, depth, depth, weight, attach)
    mae = MaskedAutoencoder(student, DecoderConfig(1, 16, 2), attach_layer=attach, seed=seed)
    return mae, teacher, Distiller(cfg, teacher, student, seed)


class TestDistilledStep:
    @pytest.mark.parametrize("kind", ["attention", "representation"])
    def test_teacher_frozen_over_ten_steps(self, kind):
        mae, teacher, dist = _setup(kind=kind)
        before = state_checksum(teacher)
        opt = torch.optim.AdamW(list(mae.parameters()) + list(dist.parameters()), lr=1e-2)
        g = torch.Generator().manual_seed(0)
        images = torch.rand(4, 3, 16, 16, generator=g)
        m0 = dist.mapping.weight.detach().clone()
        for _ in range(10):
            out = distilled_pretrain_step(mae, teacher, dist, opt, images, 0.75, g)
        assert state_checksum(teacher) == before
        assert not teacher.training
        assert not torch.equal(m0, dist.mapping.weight)
        assert out["total"] == pytest.approx(out["recon_loss"] + out["distill_loss"], rel=1e-6)
        assert out["encoder_tokens"] == 4

    def test_lambda_zero_equals_plain_mae(self):
        cfg = PretrainConfig(epochs=2, batch_size=4, base_lr=1e-2, warmup_epochs=1, seed=3, crop_scale=(0.5, 1.0))
        images = torch.rand(12, 3, 16, 16, generator=torch.Generator().manual_seed(0))
        plain, _, _ = _setup(seed=1)
        hist_plain = run_pretraining(plain, images, cfg)
        mae, teacher, dist = _setup(seed=1, weight=0.0)
        hist_dist = run_pretraining(mae, images, cfg, teacher=teacher, distiller=dist)
        assert [h["recon_loss"] for h in hist_plain] == [h["recon_loss"] for h in hist_dist]
        assert state_checksum(plain) == state_checksum(mae)

    def test_decoupling_isolation_depth12_attach8(self):
        mae, teacher, dist = _setup(depth=12, attach=8)
        images = torch.rand(2, 3, 16, 16, generator=torch.Generator().manual_seed(0))
        plan = random_mask(16, 0.75, 0, batch_size=2)
        pred, s_enc = mae(images, plan, capture="attentions")
        with torch.no_grad():
            t_enc = teacher.forward_features(images, visible=plan.visible, capture="attentions")
        recon = mae_loss(pred, reconstruction_targets(images, plan, 4), plan)
        distill = dist(t_enc, s_enc)

        def block_params(k):
            return list(mae.encoder.block(k).parameters())

        upper = [p for k in range(9, 13) for p in block_params(k)]
        g_recon = torch.autograd.grad(recon, upper, allow_unused=True, retain_graph=True)
        assert all(g is None or torch.count_nonzero(g) == 0 for g in g_recon)
        lower = torch.autograd.grad(recon, block_params(8), allow_unused=True, retain_graph=True)
        assert any(g is not None and torch.count_nonzero(g) > 0 for g in lower)
        g_dist = torch.autograd.grad(distill, block_params(12), allow_unused=True)
        assert any(g is not None and torch.count_nonzero(g) > 0 for g in g_dist)

    def test_attach_mismatch_rejected(self):
        mae, teacher, _ = _setup(depth=2, attach=1)
        dist = Distiller(d_mae(2), teacher, mae.encoder)
        opt = torch.optim.SGD(mae.parameters(), lr=0.1)
        with pytest.raises(ConfigError):
            distilled_pretrain_step(mae, teacher, dist, opt, torch.rand(2, 3, 16, 16), 0.75, 0)

    def test_token_count_mismatch(self):
        mae, teacher, dist = _setup()
        images = torch.rand(1, 3, 16, 16)
        s_enc = mae.encoder.forward_features(images, visible=random_mask(16, 0.75, 0).visible, capture="attentions")
        t_enc = teacher.forward_features(images, visible=random_mask(16, 0.5, 0).visible, capture="attentions")
        with pytest.raises(ValueError):
            dist(t_enc, s_enc)

    def test_probs_variant_selectable(self):
        student = build_model(_cfg())
        teacher = build_model(_cfg(dim=32, heads=4))
        dist = Distiller(d_mae(2, attention_kind="probs"), teacher, student)
        images = torch.rand(1, 3, 16, 16)
        t = teacher.forward_features(images, capture="attentions")
        s = student.forward_features(images, capture="attentions")
        assert torch.equal(dist.select(t, 2), t.probs.layer(2))
