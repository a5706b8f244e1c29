"""Synthetic multi-domain image folders for running every protocol without external data.

Each image is a noisy background with one class-coloured Gaussian blob (the
class is its hue) and one distractor blob of random hue. Domains differ by a
hue rotation of the class palette, background tone, blob elongation angle and
contrast, so a source-trained model degrades on the other domains without the
task becoming unlearnable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


@dataclass
class DomainStyle:
    hue_shift: float = 0.0  # in units of the class hue spacing
    background: tuple[float, float, float] = (0.45, 0.45, 0.45)
    angle: float = 0.0  # blob elongation axis, radians
    contrast: float = 1.0


DEFAULT_STYLES = {
    "src": DomainStyle(0.0, (0.45, 0.45, 0.45), 0.0, 1.0),
    "tgt": DomainStyle(0.5, (0.30, 0.38, 0.52), np.pi / 3, 0.8),
    "alt": DomainStyle(-0.45, (0.55, 0.48, 0.35), -np.pi / 4, 0.9),
}


@dataclass
class SyntheticConfig:
    domains: tuple[str, ...] = ("src", "tgt")
    n_classes: int = 5
    per_class: int = 80
    image_size: int = 28
    noise: float = 0.08
    hue_jitter: float = 0.12  # fraction of the class hue spacing
    distractor: bool = True
    distractor_size: tuple[float, float] = (0.06, 0.1)  # blob radii as a fraction of the image side
    # class hue offset in [0, 1); used to build label spaces unrelated to the main task
    hue_origin: float = 0.0
    styles: dict[str, DomainStyle] = field(default_factory=lambda: dict(DEFAULT_STYLES))
    seed: int = 0


def hsv_to_rgb(h: np.ndarray, s: np.ndarray | float, v: np.ndarray | float) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64) % 1.0
    s = np.broadcast_to(np.asarray(s, dtype=np.float64), h.shape)
    v = np.broadcast_to(np.asarray(v, dtype=np.float64), h.shape)
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    table = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.zeros(h.shape + (3,))
    for k, (r, g, b) in enumerate(table):
        m = i == k
        out[m] = np.stack([r[m], g[m], b[m]], axis=-1)
    return out


def _blob(size: int, cx: float, cy: float, sx: float, sy: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    c, s = np.cos(angle), np.sin(angle)
    u, w = c * dx + s * dy, -s * dx + c * dy
    return np.exp(-0.5 * ((u / sx) ** 2 + (w / sy) ** 2))


def render_image(rng: np.random.Generator, class_id: int, cfg: SyntheticConfig, style: DomainStyle) -> np.ndarray:
    n = cfg.image_size
    spacing = 1.0 / cfg.n_classes
    hue = cfg.hue_origin + (class_id + style.hue_shift + rng.uniform(-cfg.hue_jitter, cfg.hue_jitter)) * spacing
    img = np.broadcast_to(np.asarray(style.background), (n, n, 3)).copy()
    # low-frequency shading
    gx, gy = rng.normal(0, 0.06, 2)
    ramp = (np.linspace(-1, 1, n)[None, :] * gx + np.linspace(-1, 1, n)[:, None] * gy)[..., None]
    img = img + ramp
    if cfg.distractor:
        dhue = rng.uniform()
        dcol = hsv_to_rgb(np.array([dhue]), 0.7, 0.8)[0]
        m = _blob(n, *rng.uniform(0.15 * n, 0.85 * n, 2), *rng.uniform(cfg.distractor_size[0] * n, cfg.distractor_size[1] * n, 2), rng.uniform(0, np.pi))
        img = img * (1 - m[..., None]) + dcol * m[..., None]
    color = hsv_to_rgb(np.array([hue]), rng.uniform(0.75, 0.95), rng.uniform(0.8, 0.95))[0]
    sx = rng.uniform(0.16, 0.22) * n
    m = _blob(n, *rng.uniform(0.3 * n, 0.7 * n, 2), sx, sx * 0.55, style.angle + rng.normal(0, 0.2))
    img = img * (1 - m[..., None]) + color * m[..., None]
    img = 0.5 + style.contrast * (img - 0.5)
    img = img + rng.normal(0, cfg.noise, img.shape)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def class_names(n_classes: int) -> list[str]:
    return [f"class_{c:02d}" for c in range(n_classes)]


def make_synthetic_dataset(root: str | Path, cfg: SyntheticConfig | None = None) -> Path:
    """Write ``root/<domain>/<class>/<img>.png`` for every configured domain."""
    cfg = cfg or SyntheticConfig()
    root = Path(root)
    names = class_names(cfg.n_classes)
    for d_idx, domain in enumerate(cfg.domains):
        style = cfg.styles.get(domain, DomainStyle())
        rng = np.random.default_rng([cfg.seed, d_idx])
        for c, name in enumerate(names):
            cdir = root / domain / name
            cdir.mkdir(parents=True, exist_ok=True)
            for i in range(cfg.per_class):
                Image.fromarray(render_image(rng, c, cfg, style)).save(cdir / f"{domain}_{c:02d}_{i:04d}.png")
    return root


def generic_pretraining_config(seed: int = 7) -> SyntheticConfig:
    """A 12-class, three-style label space whose class hues sit between the task's classes.

    Bodies pretrained on it see the same kind of images but never the task's
    labels, standing in for a generic (ImageNet-like) pretrained backbone.
    """
    return SyntheticConfig(domains=("src", "tgt", "alt"), n_classes=12, per_class=60, hue_origin=0.04, seed=seed)
