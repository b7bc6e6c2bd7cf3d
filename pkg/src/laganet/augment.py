"""Training-time augmentation and test-time preprocessing for ``3 x H x W`` images."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .config import AugConfig
from .data import resize
from .errors import UsageError


def flip_horizontal(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1].copy()


def normalize(img: np.ndarray, mean, std) -> np.ndarray:
    return (img - np.asarray(mean)[:, None, None]) / np.asarray(std)[:, None, None]


def color_jitter(img: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative brightness, contrast and saturation factors in ``[1-s, 1+s]``."""
    b, c, s = rng.uniform(1 - strength, 1 + strength, size=3)
    out = img * b
    gray = 0.299 * out[0] + 0.587 * out[1] + 0.114 * out[2]
    out = (out - gray.mean()) * c + gray.mean()
    gray = 0.299 * out[0] + 0.587 * out[1] + 0.114 * out[2]
    out = gray[None] + (out - gray[None]) * s
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class ErasingBox:
    top: int
    left: int
    height: int
    width: int
    area_fraction: float  # drawn target area / image area
    aspect: float  # drawn target height / width


def sample_erasing_box(
    h: int, w: int, area: Tuple[float, float], aspect: Tuple[float, float], rng: np.random.Generator,
    attempts: int = 100,
) -> Optional[ErasingBox]:
    """Draw a rectangle with area fraction and aspect ratio in the given ranges.

    The aspect ratio is drawn log-uniformly. Returns ``None`` if no draw
    fits inside the image within ``attempts`` tries.
    """
    for _ in range(attempts):
        frac = rng.uniform(*area)
        ratio = math.exp(rng.uniform(math.log(aspect[0]), math.log(aspect[1])))
        eh = int(round(math.sqrt(frac * h * w * ratio)))
        ew = int(round(math.sqrt(frac * h * w / ratio)))
        if 0 < eh < h and 0 < ew < w:
            top = int(rng.integers(0, h - eh + 1))
            left = int(rng.integers(0, w - ew + 1))
            return ErasingBox(top, left, eh, ew, frac, ratio)
    return None


def random_erase(img: np.ndarray, cfg: AugConfig, rng: np.random.Generator) -> np.ndarray:
    if rng.random() >= cfg.erase_p:
        return img
    box = sample_erasing_box(img.shape[1], img.shape[2], cfg.erase_area, cfg.erase_aspect, rng)
    if box is None:
        return img
    out = img.copy()
    out[:, box.top : box.top + box.height, box.left : box.left + box.width] = rng.random()
    return out


def augment(
    image: np.ndarray, cfg: AugConfig, size: Tuple[int, int], rng: Optional[np.random.Generator], mode: str
) -> np.ndarray:
    """Preprocess one image to ``size``.

    ``train``: resize by ``resize_factor``, random crop, random flip, colour
    jitter, random erasing, normalisation. ``eval``: resize and normalise.
    """
    h, w = size
    if mode == "eval":
        return normalize(resize(image, h, w), cfg.mean, cfg.std)
    if mode != "train":
        raise UsageError(f"augment mode must be 'train' or 'eval', got {mode!r}")
    if not cfg.enabled:
        return normalize(resize(image, h, w), cfg.mean, cfg.std)
    bh, bw = int(round(h * cfg.resize_factor)), int(round(w * cfg.resize_factor))
    img = resize(image, bh, bw)
    top = int(rng.integers(0, bh - h + 1))
    left = int(rng.integers(0, bw - w + 1))
    img = img[:, top : top + h, left : left + w]
    if rng.random() < cfg.flip_p:
        img = flip_horizontal(img)
    if cfg.jitter > 0:
        img = color_jitter(img, cfg.jitter, rng)
    img = random_erase(img, cfg, rng)
    return normalize(img, cfg.mean, cfg.std)
