"""Desk-scale test material: natural-image pans and shifted crop pairs."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import ndimage

from .frames import Frame, Role

# bundled with scikit-image, no download needed
TRAIN_IMAGES = ("astronaut", "chelsea", "rocket", "immunohistochemistry", "hubble_deep_field")
HELDOUT_IMAGES = ("camera", "grass", "brick", "coffee")

# potential = RANKING_WEIGHTS . features + 30 dB for the synthetic ranking task
RANKING_WEIGHTS = (1.5, 0.5, 0.5, 4.0, 1.0, 1.0)


def natural_image(name: str) -> np.ndarray:
    """RGB float image in [0, 1] from ``skimage.data``."""
    import skimage.data

    img = getattr(skimage.data, name)()
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    return img[..., :3] / 255.0


def rgb_to_yuv420(rgb: np.ndarray, index: int = 0) -> Frame:
    """Full-range BT.601 conversion with 2x2 chroma averaging."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    u = 0.5 + (b - y) * 0.564
    v = 0.5 + (r - y) * 0.713
    h, w = y.shape

    def down(p):
        return p.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))

    return Frame(np.clip(y, 0, 1), np.clip(down(u), 0, 1), np.clip(down(v), 0, 1), role=Role.RAW, index=index)


def _sample(img: np.ndarray, x0: float, y0: float, h: int, w: int) -> np.ndarray:
    if float(x0).is_integer() and float(y0).is_integer():
        return img[int(y0):int(y0) + h, int(x0):int(x0) + w].copy()
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.stack([ndimage.map_coordinates(img[..., c], [yy + y0, xx + x0], order=1, mode="nearest")
                     for c in range(img.shape[2])], axis=-1)


def panning_clip(image: np.ndarray, n_frames: int, height: int, width: int,
                 velocity=(1.5, 0.75), start=None, seed: int = 0, jitter: float = 0.5) -> list[Frame]:
    """Window sliding over ``image`` at ``velocity`` px/frame plus random jitter."""
    rng = np.random.default_rng(seed)
    ih, iw = image.shape[:2]

    def origin_range(v, extent, size):
        lo = min(0.0, v * (n_frames - 1)) - jitter
        hi = max(0.0, v * (n_frames - 1)) + jitter
        return -lo, extent - size - 1 - hi

    (ax, bx), (ay, by) = origin_range(velocity[0], iw, width), origin_range(velocity[1], ih, height)
    if bx < ax or by < ay:
        raise ValueError(f"image {iw}x{ih} too small for a {n_frames}-frame {width}x{height} pan")
    x0, y0 = start if start is not None else (rng.uniform(ax, bx), rng.uniform(ay, by))
    vx, vy = velocity
    frames = []
    for t in range(n_frames):
        jx, jy = rng.uniform(-jitter, jitter, size=2)
        crop = _sample(image, x0 + vx * t + jx, y0 + vy * t + jy, height, width)
        frames.append(rgb_to_yuv420(crop, index=t))
    return frames


def luma(image: np.ndarray) -> np.ndarray:
    return 0.299 * image[..., 0] + 0.587 * image[..., 1] + 0.114 * image[..., 2]


def shifted_pairs(images: Sequence[np.ndarray], count: int, size: int = 64, max_shift: int = 3,
                  rng: np.random.Generator | None = None) -> tuple:
    """Reference/target luma crops related by an integer translation.

    ``target(x, y) == reference(x + dx, y + dy)``, so the returned shifts
    are the flow that warps the reference onto the target.
    """
    rng = rng or np.random.default_rng(0)
    planes = [luma(im) if im.ndim == 3 else im for im in images]
    refs = np.empty((count, size, size))
    tgts = np.empty((count, size, size))
    shifts = rng.integers(-max_shift, max_shift + 1, size=(count, 2))
    for k in range(count):
        img = planes[rng.integers(len(planes))]
        h, w = img.shape
        x = rng.integers(max_shift, w - size - max_shift)
        y = rng.integers(max_shift, h - size - max_shift)
        dx, dy = shifts[k]
        tgts[k] = img[y:y + size, x:x + size]
        refs[k] = img[y - dy:y - dy + size, x - dx:x - dx + size]
    return refs, tgts, shifts.astype(np.float64)


def ranking_task(n_batches: int, rng: np.random.Generator | None = None, min_size: int = 2,
                 max_size: int = 16, noise: float = 0.0) -> list:
    """``(features, potentials)`` batches whose potential is linear in the features.

    Features mimic valid references: PSNR gains in (0, 3] dB and
    correlations in (0.3, 1).
    """
    rng = rng or np.random.default_rng(0)
    w = np.asarray(RANKING_WEIGHTS)
    out = []
    for _ in range(n_batches):
        k = int(rng.integers(min_size, max_size + 1))
        feats = np.concatenate([rng.uniform(0.01, 3.0, (k, 3)), rng.uniform(0.31, 0.99, (k, 3))], axis=1)
        out.append((feats, 30.0 + feats @ w + noise * rng.standard_normal(k)))
    return out
