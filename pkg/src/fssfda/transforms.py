"""Image decoding and the train/eval preprocessing pipelines.

Images are decoded once into square uint8 tensors of side ``load_size`` (short
side resized, then centre-cropped). Training augmentation runs batched on those
tensors: random resized crop and horizontal flip in a single affine resample,
then brightness/contrast/saturation jitter and random grayscale. All randomness
comes from an explicit ``torch.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import math

import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from PIL import Image, UnidentifiedImageError

from .errors import DataError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class AugmentConfig:
    crop_size: int = 224
    scale: tuple[float, float] = (0.7, 1.0)
    ratio: tuple[float, float] = (3 / 4, 4 / 3)
    jitter: float = 0.3
    grayscale_p: float = 0.1
    hflip_p: float = 0.5

    @property
    def load_size(self) -> int:
        # 224 -> 256, the usual resize-then-centre-crop ratio
        return int(round(self.crop_size / 0.875))


def load_image(path: str | Path, size: int) -> torch.Tensor:
    """Decode to a ``3 x size x size`` uint8 tensor."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            w, h = im.size
            scale = size / min(w, h)
            im = im.resize((max(size, round(w * scale)), max(size, round(h * scale))), Image.BILINEAR)
            t = TF.pil_to_tensor(im)
    except (OSError, UnidentifiedImageError) as e:
        raise DataError(f"cannot decode image {path}: {e}") from e
    return TF.center_crop(t, [size, size])


def load_images(paths: Sequence[str | Path], size: int) -> torch.Tensor:
    if not paths:
        return torch.empty(0, 3, size, size, dtype=torch.uint8)
    return torch.stack([load_image(p, size) for p in paths])


def normalize(x: torch.Tensor) -> torch.Tensor:
    mean = torch.tensor(IMAGENET_MEAN, dtype=x.dtype).view(1, 3, 1, 1)
    std = torch.tensor(IMAGENET_STD, dtype=x.dtype).view(1, 3, 1, 1)
    return (x - mean) / std


def eval_transform(images: torch.Tensor, cfg: AugmentConfig) -> torch.Tensor:
    x = images.float() / 255.0
    if x.shape[-1] != cfg.load_size:
        x = TF.resize(x, [cfg.load_size, cfg.load_size], antialias=True)
    return normalize(TF.center_crop(x, [cfg.crop_size, cfg.crop_size]))


def _uniform(n: int, lo: float, hi: float, gen: torch.Generator) -> torch.Tensor:
    return lo + (hi - lo) * torch.rand(n, generator=gen, dtype=torch.float64)


def _gray(x: torch.Tensor) -> torch.Tensor:
    return (0.299 * x[:, 0:1] + 0.587 * x[:, 1:2] + 0.114 * x[:, 2:3])


def train_transform(images: torch.Tensor, cfg: AugmentConfig, gen: torch.Generator) -> torch.Tensor:
    n = images.shape[0]
    x = images.float() / 255.0

    # random resized crop (+ flip) as one affine resample; side lengths are in units of the image side
    area = _uniform(n, *cfg.scale, gen)
    log_r = _uniform(n, math.log(cfg.ratio[0]), math.log(cfg.ratio[1]), gen)
    aspect = torch.exp(log_r)
    w = torch.sqrt(area * aspect).clamp(max=1.0)
    h = torch.sqrt(area / aspect).clamp(max=1.0)
    cx = (1 - w) * (2 * torch.rand(n, generator=gen, dtype=torch.float64) - 1)
    cy = (1 - h) * (2 * torch.rand(n, generator=gen, dtype=torch.float64) - 1)
    flip = torch.where(torch.rand(n, generator=gen) < cfg.hflip_p, -1.0, 1.0).double()
    theta = torch.zeros(n, 2, 3, dtype=torch.float64)
    theta[:, 0, 0] = w * flip
    theta[:, 0, 2] = cx
    theta[:, 1, 1] = h
    theta[:, 1, 2] = cy
    grid = F.affine_grid(theta.float(), [n, 3, cfg.crop_size, cfg.crop_size], align_corners=False)
    x = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)

    j = cfg.jitter
    if j > 0:
        lo, hi = max(0.0, 1 - j), 1 + j
        b = _uniform(n, lo, hi, gen).float().view(n, 1, 1, 1)
        c = _uniform(n, lo, hi, gen).float().view(n, 1, 1, 1)
        s = _uniform(n, lo, hi, gen).float().view(n, 1, 1, 1)
        x = (x * b).clamp(0, 1)
        mean = _gray(x).mean(dim=(1, 2, 3), keepdim=True)
        x = (c * x + (1 - c) * mean).clamp(0, 1)
        x = (s * x + (1 - s) * _gray(x)).clamp(0, 1)
    g = torch.rand(n, generator=gen) < cfg.grayscale_p
    if g.any():
        x = torch.where(g.view(n, 1, 1, 1), _gray(x).expand_as(x), x)
    return normalize(x)


def augment(image: str | Path | torch.Tensor, train_mode: bool, seed: int = 0, cfg: AugmentConfig | None = None) -> torch.Tensor:
    """Preprocess one image (a path or a decoded ``3 x H x W`` uint8 tensor) into ``3 x crop x crop``."""
    cfg = cfg or AugmentConfig()
    if isinstance(image, torch.Tensor):
        x = image.unsqueeze(0)
        if x.shape[-1] != cfg.load_size or x.shape[-2] != cfg.load_size:
            x = TF.center_crop(TF.resize(x, cfg.load_size, antialias=True), [cfg.load_size, cfg.load_size])
    else:
        x = load_image(image, cfg.load_size).unsqueeze(0)
    if not train_mode:
        return eval_transform(x, cfg)[0]
    gen = torch.Generator().manual_seed(seed)
    return train_transform(x, cfg, gen)[0]
