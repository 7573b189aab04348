"""Synthetic dense-prediction data: coloured shapes on a textured background."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .core import MaskSet


def rng_for(seed: int, stream: str, *extra: int) -> np.random.Generator:
    """Named, independent random sub-stream derived from one experiment seed."""
    return np.random.default_rng([int(seed), zlib.crc32(stream.encode()), *map(int, extra)])


@dataclass
class ToySample:
    image: np.ndarray   # (3, H, W) in [0, 1]
    labels: np.ndarray  # (H, W) int64 in [0, K_cls)


# Kind k >= 1 gets shape SHAPES[(k - 1) % len(SHAPES)] and hue PALETTE[(k - 1) % len(PALETTE)].
SHAPES = ("disk", "square", "ring", "diamond")
PALETTE = np.array([
    [0.85, 0.30, 0.25],
    [0.25, 0.70, 0.35],
    [0.30, 0.40, 0.90],
    [0.85, 0.75, 0.20],
    [0.70, 0.30, 0.80],
    [0.20, 0.75, 0.80],
])


def _shape_mask(kind_shape: str, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if kind_shape == "disk":
        return dy * dy + dx * dx <= r * r
    if kind_shape == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if kind_shape == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.45 * r) ** 2)
    if kind_shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= r * 1.2
    raise ValueError(kind_shape)


def _background(rng, H, W):
    yy, xx = np.mgrid[0:H, 0:W] / max(H, W)
    base = rng.uniform(0.35, 0.6)
    tint = rng.uniform(-0.08, 0.08, size=3)
    img = np.empty((3, H, W))
    for c in range(3):
        field = np.zeros((H, W))
        for _ in range(3):
            fy, fx = rng.uniform(1.0, 6.0, size=2)
            ph = rng.uniform(0, 2 * np.pi)
            field += np.sin(2 * np.pi * (fy * yy + fx * xx) + ph)
        img[c] = base + tint[c] + 0.06 * field
    return img


def make_sample(seed: int, index: int, H: int, W: int, n_classes: int, noise: float = 0.08) -> ToySample:
    rng = rng_for(seed, "data", index)
    img = _background(rng, H, W)
    labels = np.zeros((H, W), dtype=np.int64)
    yy, xx = np.mgrid[0:H, 0:W]
    n_blobs = int(rng.integers(1, 5))
    side = min(H, W)
    for _ in range(n_blobs):
        kind = int(rng.integers(1, n_classes))
        shape = SHAPES[(kind - 1) % len(SHAPES)]
        r = rng.uniform(side / 7, side / 4.5)
        cy = rng.uniform(r * 0.6, H - r * 0.6)
        cx = rng.uniform(r * 0.6, W - r * 0.6)
        m = _shape_mask(shape, yy, xx, cy, cx, r)
        color = PALETTE[(kind - 1) % len(PALETTE)] + rng.uniform(-0.2, 0.2, size=3)
        img[:, m] = color[:, None]
        labels[m] = kind
    img += rng.normal(0.0, noise, size=img.shape)
    return ToySample(np.clip(img, 0.0, 1.0), labels)


def gen_dataset(seed: int, n: int, H: int = 64, W: int = 64, n_classes: int = 4,
                noise: float = 0.08) -> list[ToySample]:
    """Deterministic list of ``n`` samples; sample i depends only on (seed, i)."""
    if H < 16 or W < 16:
        raise ValueError(f"image extents must be at least 16, got {H}x{W}")
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    if n < 0:
        raise ValueError("n must be nonnegative")
    return [make_sample(seed, i, H, W, n_classes, noise) for i in range(n)]


def stack(samples: list[ToySample]) -> tuple[np.ndarray, np.ndarray]:
    """Batch arrays (N, 3, H, W) float and (N, H, W) int."""
    return (np.stack([s.image for s in samples]).astype(ad.get_default_dtype()),
            np.stack([s.labels for s in samples]))


def gt_masks(labels: np.ndarray, n_classes: int) -> MaskSet:
    """One binary mask per class (one-hot over pixels), shape (K, H*W) or (N, K, H*W)."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    flat = labels.reshape(labels.shape[:-2] + (-1,))
    onehot = (flat[..., None, :] == np.arange(n_classes)[:, None]).astype(ad.get_default_dtype())
    return MaskSet(ad.Tensor(onehot), "teacher")
