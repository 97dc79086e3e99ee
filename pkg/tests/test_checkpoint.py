import pytest
import torch

from mimlite.checkpoint import (
    CheckpointError,
    ShapeMismatchError,
    load_checkpoint,
    load_into,
    load_model,
    loss_digest,
    save_checkpoint,
)
from mimlite.vit import ModelConfig, build_model, state_checksum


def _cfg(dim=16, classes=4):
    return ModelConfig(image_size=16, patch_size=4, depth=2, embed_dim=dim, num_heads=2, num_classes=classes)


def test_model_round_trip_is_bitwise(tmp_path):
    model = build_model(_cfg(), 3)
    path = save_checkpoint(tmp_path / "m.ckpt", model, {"config": model.config.to_dict(), "seed": 3, "step": 7})
    loaded, meta = load_model(path)
    assert state_checksum(loaded) == state_checksum(model)
    assert meta["seed"] == 3 and meta["step"] == 7 and meta["loss_digest"] is None


@pytest.mark.parametrize(
    "tensor",
    [
        torch.randn(3, 2, dtype=torch.float64),
        torch.randn(4).to(torch.bfloat16),
        torch.randn(2, 2).half(),
        torch.arange(5, dtype=torch.int64),
        torch.arange(5, dtype=torch.int32),
        torch.tensor([1, 255], dtype=torch.uint8),
        torch.tensor([True, False]),
        torch.tensor(3.5),
    ],
)
def test_dtype_round_trip(tmp_path, tensor):
    save_checkpoint(tmp_path / "t.ckpt", {"x": tensor})
    state, _ = load_checkpoint(tmp_path / "t.ckpt")
    assert state["x"].dtype == tensor.dtype and torch.equal(state["x"], tensor)


def test_truncated_file_rejected(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", build_model(_cfg()))
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_flipped_byte_rejected(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", build_model(_cfg()))
    data = bytearray(path.read_bytes())
    data[-1] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_not_a_checkpoint(tmp_path):
    (tmp_path / "x").write_bytes(b"hello world, this is not a checkpoint file at all" * 2)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "x")


def test_shape_mismatch_lists_tensors(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", build_model(_cfg(dim=32)))
    with pytest.raises(ShapeMismatchError) as exc:
        load_model(path, config=_cfg(dim=16))
    assert any("patch_embed" in d for d in exc.value.diffs)


def test_head_ignored_on_class_change():
    src = build_model(_cfg(classes=4), 0)
    dst = build_model(_cfg(classes=7), 1)
    load_into(dst, src.state_dict(), ignore=("head.",))
    assert torch.equal(dst.block(1).attn.qkv.weight, src.block(1).attn.qkv.weight)
    assert dst.head.out_features == 7


def test_missing_config_needs_explicit(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", build_model(_cfg()))
    with pytest.raises(CheckpointError):
        load_model(path)
    model, _ = load_model(path, config=_cfg())
    assert model.config == _cfg()


def test_loss_digest():
    hist = [{"step": 0, "total": 1.25}, {"step": 1, "total": 1.0}]
    assert loss_digest(hist) == loss_digest([dict(h) for h in hist])
    assert loss_digest(hist) != loss_digest(hist[:1])
    assert loss_digest([]) is None


def test_save_is_atomic(tmp_path):
    path = save_checkpoint(tmp_path / "sub" / "m.ckpt", {"x": torch.zeros(1)})
    assert path.exists() and not list(path.parent.glob("*.tmp"))
