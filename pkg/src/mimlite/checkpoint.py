"""Self-describing checkpoint container.

Layout (all integers little-endian)::

    magic     8 bytes   b"MIMLCKPT"
    version   u32
    meta_len  u64       length of the JSON metadata block
    body_len  u64       length of the tensor block
    sha256    32 bytes  digest of metadata block + tensor block
    metadata  meta_len bytes of UTF-8 JSON
    tensors   u32 count, then per tensor:
                u16 name length, name (UTF-8),
                u8 dtype tag, u8 ndim, ndim x u64 shape,
                raw element bytes in little-endian order

Loading verifies the digest before any tensor is materialized, so a
truncated or corrupted file never yields a partial state.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .vit import ModelConfig, VisionTransformer, build_model

MAGIC = b"MIMLCKPT"
VERSION = 1
_HEADER = struct.Struct("<8sIQQ32s")

# tag -> (torch dtype, little-endian numpy dtype used for the raw bytes)
DTYPES = {
    1: (torch.float32, "<f4"),
    2: (torch.float64, "<f8"),
    3: (torch.float16, "<f2"),
    4: (torch.bfloat16, "<u2"),
    5: (torch.int64, "<i8"),
    6: (torch.int32, "<i4"),
    7: (torch.uint8, "|u1"),
    8: (torch.bool, "|b1"),
}
_TAGS = {dt: tag for tag, (dt, _) in DTYPES.items()}


class CheckpointError(ValueError):
    """Corrupt, truncated or unsupported checkpoint file."""


class ShapeMismatchError(ValueError):
    def __init__(self, diffs: list[str]):
        self.diffs = diffs
        super().__init__("checkpoint does not match model:\n  " + "\n  ".join(diffs))


def loss_digest(history: list[dict] | None) -> str | None:
    """Short SHA-256 over the loss history, formatted with full float repr."""
    if not history:
        return None
    h = hashlib.sha256()
    for row in history:
        h.update(json.dumps(row, sort_keys=True).encode())
    return h.hexdigest()


def _encode_tensor(name: str, t: torch.Tensor) -> bytes:
    t = t.detach().cpu().contiguous()
    if t.dtype not in _TAGS:
        raise CheckpointError(f"{name}: unsupported dtype {t.dtype}")
    tag = _TAGS[t.dtype]
    np_dtype = DTYPES[tag][1]
    if t.dtype == torch.bfloat16:
        arr = t.view(torch.int16).numpy().view(np.uint16)
    else:
        arr = t.numpy()
    raw = arr.astype(np_dtype, copy=False).tobytes()
    name_b = name.encode()
    head = struct.pack("<H", len(name_b)) + name_b + struct.pack("<BB", tag, t.dim())
    head += struct.pack(f"<{t.dim()}Q", *t.shape)
    return head + raw


def _decode_tensors(body: bytes) -> dict[str, torch.Tensor]:
    out: dict[str, torch.Tensor] = {}
    (count,) = struct.unpack_from("<I", body, 0)
    pos = 4
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos : pos + name_len].decode()
        pos += name_len
        tag, ndim = struct.unpack_from("<BB", body, pos)
        pos += 2
        if tag not in DTYPES:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        shape = struct.unpack_from(f"<{ndim}Q", body, pos)
        pos += 8 * ndim
        dtype, np_dtype = DTYPES[tag]
        numel = int(np.prod(shape)) if ndim else 1
        nbytes = numel * np.dtype(np_dtype).itemsize
        arr = np.frombuffer(body, dtype=np_dtype, count=numel, offset=pos).reshape(shape)
        pos += nbytes
        if dtype == torch.bfloat16:
            t = torch.from_numpy(arr.astype(np.int16)).view(torch.bfloat16)
        else:
            t = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
        out[name] = t.clone()
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after the tensor block")
    return out


def save_checkpoint(path: str | os.PathLike, state: nn.Module | dict[str, torch.Tensor], metadata: dict | None = None) -> Path:
    """Write ``state`` (a module or state dict) plus JSON ``metadata`` atomically."""
    if isinstance(state, nn.Module):
        state = state.state_dict()
    meta = {"config": None, "seed": None, "step": None, "loss_digest": None}
    meta.update(metadata or {})
    meta_b = json.dumps(meta, sort_keys=True).encode()
    body = struct.pack("<I", len(state)) + b"".join(_encode_tensor(k, v) for k, v in state.items())
    digest = hashlib.sha256(meta_b + body).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(meta_b), len(body), digest))
        f.write(meta_b)
        f.write(body)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict]:
    """Return ``(state_dict, metadata)`` after verifying magic, version and digest."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError(f"{path}: file too short for a checkpoint header")
    magic, version, meta_len, body_len, digest = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    payload = data[_HEADER.size :]
    if len(payload) != meta_len + body_len or hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (file truncated or corrupted)")
    meta = json.loads(payload[:meta_len].decode())
    return _decode_tensors(payload[meta_len:]), meta


def shape_diff(expected: dict[str, torch.Tensor], found: dict[str, torch.Tensor]) -> list[str]:
    diffs = []
    for name, t in expected.items():
        if name not in found:
            diffs.append(f"{name}: missing from checkpoint")
        elif tuple(found[name].shape) != tuple(t.shape):
            diffs.append(f"{name}: checkpoint {tuple(found[name].shape)} vs model {tuple(t.shape)}")
    for name in found:
        if name not in expected:
            diffs.append(f"{name}: unexpected in checkpoint")
    return diffs


def load_into(model: nn.Module, state: dict[str, torch.Tensor], ignore: tuple[str, ...] = ()) -> nn.Module:
    """Copy ``state`` into ``model`` only if every shape matches.

    Names starting with a prefix in ``ignore`` are skipped on both sides,
    e.g. ``("head.",)`` to keep a freshly initialized classifier.
    """
    own = {k: v for k, v in model.state_dict().items() if not k.startswith(ignore or ("\0",))}
    found = {k: v for k, v in state.items() if not k.startswith(ignore or ("\0",))}
    diffs = shape_diff(own, found)
    if diffs:
        raise ShapeMismatchError(diffs)
    with torch.no_grad():
        for name, t in own.items():
            t.copy_(found[name])
    return model


def load_model(path: str | os.PathLike, config: ModelConfig | None = None, seed: int = 0, ignore: tuple[str, ...] = ()) -> tuple[VisionTransformer, dict]:
    """Build a ViT from ``config`` (or the stored one) and fill it from ``path``."""
    state, meta = load_checkpoint(path)
    if config is None:
        if not meta.get("config"):
            raise CheckpointError(f"{path}: no model config stored; pass one explicitly")
        config = ModelConfig.from_dict(meta["config"])
    model = build_model(config, seed)
    return load_into(model, state, ignore), meta
