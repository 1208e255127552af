"""Image augmentation: crop 95%, resize back, rotate within 5 degrees, colour jitter.

Nearest-neighbour resampling throughout; bilinear blurs the 2-pixel cells of a
16x16 render into each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

CROP = 0.95
MAX_ANGLE = 5.0
BRIGHTNESS, CONTRAST, SATURATION = 0.3, 0.4, 0.5
_GRAY = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AugmentParams:
    crop_y: int
    crop_x: int
    angle: float
    brightness: float
    contrast: float
    saturation: float


def crop_size(size: int) -> int:
    return int(size * CROP)


def draw_params(rng: np.random.Generator, size: int) -> AugmentParams:
    c = crop_size(size)
    return AugmentParams(
        crop_y=int(rng.integers(0, size - c + 1)),
        crop_x=int(rng.integers(0, size - c + 1)),
        angle=float(rng.uniform(-MAX_ANGLE, MAX_ANGLE)),
        brightness=float(rng.uniform(1 - BRIGHTNESS, 1 + BRIGHTNESS)),
        contrast=float(rng.uniform(1 - CONTRAST, 1 + CONTRAST)),
        saturation=float(rng.uniform(1 - SATURATION, 1 + SATURATION)),
    )


def identity_params(size: int) -> AugmentParams:
    off = (size - crop_size(size)) // 2
    return AugmentParams(off, off, 0.0, 1.0, 1.0, 1.0)


def resize_nearest(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    ys = (np.arange(size) * h) // size
    xs = (np.arange(size) * w) // size
    return img[ys][:, xs]


def apply_augment(img: np.ndarray, p: AugmentParams) -> np.ndarray:
    size = img.shape[0]
    c = crop_size(size)
    out = img[p.crop_y : p.crop_y + c, p.crop_x : p.crop_x + c]
    out = resize_nearest(out, size)
    if p.angle:
        out = ndimage.rotate(out, p.angle, axes=(0, 1), reshape=False, order=0, mode="nearest")
    out = out * p.brightness
    mean = (out @ _GRAY).mean()
    out = (out - mean) * p.contrast + mean
    gray = (out @ _GRAY)[..., None]
    out = gray + (out - gray) * p.saturation
    return np.clip(out, 0.0, 1.0)


def augment_image(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One (S, S, 3) image in [0, 1]; the output keeps its shape and range."""
    return apply_augment(np.asarray(img, dtype=np.float64), draw_params(rng, img.shape[0]))


def augment_cameras(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment_image(im, rng) for im in images]).astype(np.float32)
