"""Dataset ingestion, desk-scale corpora and deterministic batching."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

DATASET_KINDS = ("image_directory", "synthetic_blobs", "builtin_small")
IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp", ".ppm"}
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25

BUILTIN_CLASSES = tuple(str(d) for d in range(10))


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "builtin_small"
    root: str | None = None
    image_size: int = 32
    num_classes: int = 10
    train_fraction: float = 0.8
    eval_fraction: float = 0.2
    # builtin/synthetic corpora only
    num_samples: int = 2000

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise DatasetError(f"dataset kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        if self.kind == "image_directory" and not self.root:
            raise DatasetError("image_directory datasets need a root path")
        if self.num_classes < 2:
            raise DatasetError("need at least two classes")
        if self.kind == "builtin_small" and self.num_classes > len(BUILTIN_CLASSES):
            raise DatasetError(f"builtin_small has at most {len(BUILTIN_CLASSES)} classes")
        if not math.isclose(self.train_fraction + self.eval_fraction, 1.0, abs_tol=1e-9):
            raise DatasetError("train and eval fractions must sum to 1")
        if not 0 < self.train_fraction < 1:
            raise DatasetError("train fraction must be in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ImageDataset:
    images: torch.Tensor  # (N, C, H, W), normalized
    labels: torch.Tensor  # (N,)
    classes: list[str]

    def __len__(self):
        return self.images.shape[0]

    def subset(self, index) -> "ImageDataset":
        index = torch.as_tensor(index, dtype=torch.long)
        return ImageDataset(self.images[index], self.labels[index], self.classes)

    def class_prior(self) -> float:
        """Accuracy of always predicting the most frequent class."""
        counts = torch.bincount(self.labels, minlength=len(self.classes))
        return counts.max().item() / max(1, len(self))


@dataclass
class Splits:
    train: ImageDataset
    eval: ImageDataset
    skipped: list[str] = field(default_factory=list)

    @property
    def classes(self) -> list[str]:
        return self.train.classes


def stratified_split(labels: torch.Tensor, eval_fraction: float, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    g = torch.Generator().manual_seed(seed)
    train, evals = [], []
    for c in torch.unique(labels, sorted=True).tolist():
        idx = torch.nonzero(labels == c).flatten()
        idx = idx[torch.randperm(len(idx), generator=g)]
        n_eval = int(round(len(idx) * eval_fraction))
        evals.append(idx[:n_eval])
        train.append(idx[n_eval:])
    return torch.sort(torch.cat(train)).values, torch.sort(torch.cat(evals)).values


def _normalize(x: torch.Tensor) -> torch.Tensor:
    return (x - PIXEL_MEAN) / PIXEL_STD


def load_image_directory(root: str | os.PathLike, image_size: int) -> tuple[torch.Tensor, torch.Tensor, list[str], list[str]]:
    from PIL import Image, UnidentifiedImageError

    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a readable directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if len(classes) < 2:
        raise DatasetError(f"{root}: need at least two class subdirectories, found {classes}")
    images, labels, skipped = [], [], []
    for ci, cls in enumerate(classes):
        files = sorted(f for f in (root / cls).iterdir() if f.is_file() and f.suffix.lower() in IMAGE_EXTS)
        n_ok = 0
        for f in files:
            try:
                with Image.open(f) as im:
                    im = im.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except (UnidentifiedImageError, OSError) as exc:
                skipped.append(str(f))
                log.debug("skipping %s: %s", f, exc)
                continue
            images.append(torch.from_numpy(arr).permute(2, 0, 1))
            labels.append(ci)
            n_ok += 1
        if n_ok == 0:
            raise DatasetError(f"class {cls!r} has no decodable images")
    if skipped:
        log.warning("skipped %d undecodable files under %s", len(skipped), root)
    return torch.stack(images), torch.tensor(labels), classes, skipped


def _glyph_mask(font_cache: dict, digit: str, size: int, scale: int, rng: np.random.Generator) -> np.ndarray:
    """Anti-aliased coverage mask of one bold, jittered, slightly rotated digit in [0, 1]."""
    from PIL import Image, ImageDraw, ImageFont

    big = size * scale
    pt = int(rng.uniform(0.8, 1.0) * big)
    if pt not in font_cache:
        font_cache[pt] = ImageFont.load_default(size=pt)
    layer = Image.new("L", (big, big), 0)
    cx, cy = (0.5 + rng.uniform(-0.08, 0.08, size=2)) * big
    draw = ImageDraw.Draw(layer)
    draw.text((cx, cy), digit, font=font_cache[pt], anchor="mm", fill=255, stroke_width=scale, stroke_fill=255)
    layer = layer.rotate(rng.uniform(-8, 8), resample=Image.BILINEAR, center=(cx, cy))
    layer = layer.resize((size, size), Image.BOX)
    return np.asarray(layer, dtype=np.float64) / 255.0


def generate_builtin(num_samples: int, image_size: int = 32, num_classes: int = 10, seed: int = 0) -> tuple[torch.Tensor, torch.Tensor, list[str]]:
    """Procedural colored-digit corpus: class = rendered digit.

    Glyph size, rotation, position and the two colors vary per image, with
    light pixel noise on top; labels are balanced.
    """
    if not 2 <= num_classes <= len(BUILTIN_CLASSES):
        raise DatasetError(f"builtin_small supports 2..{len(BUILTIN_CLASSES)} classes, got {num_classes}")
    rng = np.random.default_rng(seed)
    s = image_size
    labels = np.arange(num_samples) % num_classes
    rng.shuffle(labels)
    fonts: dict = {}
    out = np.empty((num_samples, 3, s, s), dtype=np.float32)
    for n, lab in enumerate(labels):
        alpha = _glyph_mask(fonts, BUILTIN_CLASSES[lab], s, 2, rng)
        # glyphs are always lighter than the background
        bg = rng.uniform(0, 0.45, size=3)
        fg = rng.uniform(0.55, 1, size=3)
        img = bg[:, None, None] * (1 - alpha[None]) + fg[:, None, None] * alpha[None]
        img = img + rng.normal(0, 0.02, size=img.shape)
        out[n] = np.clip(img, 0, 1)
    return torch.from_numpy(out), torch.from_numpy(labels).long(), list(BUILTIN_CLASSES[:num_classes])


def generate_blobs(num_samples: int, image_size: int, num_classes: int, seed: int = 0, spread: float = 0.3) -> tuple[torch.Tensor, torch.Tensor, list[str]]:
    """Gaussian blobs in pixel space around one random prototype image per class."""
    g = torch.Generator().manual_seed(seed)
    protos = torch.rand(num_classes, 3, image_size, image_size, generator=g)
    labels = torch.arange(num_samples) % num_classes
    labels = labels[torch.randperm(num_samples, generator=g)]
    noise = torch.randn(num_samples, 3, image_size, image_size, generator=g) * spread
    images = (protos[labels] + noise).clamp(0, 1)
    return images, labels, [f"blob_{i}" for i in range(num_classes)]


def cache_dir() -> Path | None:
    d = os.environ.get("MIMLITE_CACHE")
    return Path(d) if d else None


def _cached(key: dict, build):
    root = cache_dir()
    if root is None:
        return build()
    digest = hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]
    path = root / f"corpus_{digest}.pt"
    if path.exists():
        blob = torch.load(path)
        return blob["images"], blob["labels"], blob["classes"]
    images, labels, classes = build()
    root.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    torch.save({"images": images, "labels": labels, "classes": classes}, tmp)
    tmp.replace(path)
    return images, labels, classes


def ingest_dataset(spec: DatasetSpec, seed: int = 0) -> Splits:
    """Load or generate a corpus and split it deterministically per class."""
    skipped: list[str] = []
    if spec.kind == "image_directory":
        images, labels, classes, skipped = load_image_directory(spec.root, spec.image_size)
    elif spec.kind == "builtin_small":
        key = {"version": 2, "kind": spec.kind, "n": spec.num_samples, "size": spec.image_size, "classes": spec.num_classes, "seed": seed}
        images, labels, classes = _cached(
            key, lambda: generate_builtin(spec.num_samples, spec.image_size, spec.num_classes, seed)
        )
    else:
        images, labels, classes = generate_blobs(spec.num_samples, spec.image_size, spec.num_classes, seed)
    images = _normalize(images)
    train_idx, eval_idx = stratified_split(labels, spec.eval_fraction, seed)
    return Splits(
        train=ImageDataset(images[train_idx], labels[train_idx], classes),
        eval=ImageDataset(images[eval_idx], labels[eval_idx], classes),
        skipped=skipped,
    )


def batch_indices(n: int, batch_size: int, generator: torch.Generator | None = None, drop_last: bool = False):
    """Yield index tensors; shuffled when a generator is supplied."""
    order = torch.randperm(n, generator=generator) if generator is not None else torch.arange(n)
    stop = n - n % batch_size if drop_last and n >= batch_size else n
    for i in range(0, stop, batch_size):
        yield order[i : i + batch_size]


def random_resized_crop_flip(images: torch.Tensor, generator: torch.Generator, scale=(0.35, 1.0), ratio=(3 / 4, 4 / 3), flip: bool = True) -> torch.Tensor:
    """Per-sample random resized crop and horizontal flip at the input resolution.

    Crops are expressed as affine sampling grids so the whole batch is
    resampled in one bilinear ``grid_sample`` call.
    """
    b = images.shape[0]
    area = torch.empty(b).uniform_(scale[0], scale[1], generator=generator)
    log_r = torch.empty(b).uniform_(math.log(ratio[0]), math.log(ratio[1]), generator=generator)
    aspect = torch.exp(log_r)
    w = torch.sqrt(area * aspect).clamp(max=1.0)
    h = torch.sqrt(area / aspect).clamp(max=1.0)
    cx = (torch.rand(b, generator=generator) * 2 - 1) * (1 - w)
    cy = (torch.rand(b, generator=generator) * 2 - 1) * (1 - h)
    sign = torch.ones(b)
    if flip:
        sign = torch.where(torch.rand(b, generator=generator) < 0.5, -1.0, 1.0)
    theta = torch.zeros(b, 2, 3)
    theta[:, 0, 0] = w * sign
    theta[:, 0, 2] = cx
    theta[:, 1, 1] = h
    theta[:, 1, 2] = cy
    grid = F.affine_grid(theta, list(images.shape), align_corners=False)
    return F.grid_sample(images, grid, mode="bilinear", padding_mode="border", align_corners=False)
