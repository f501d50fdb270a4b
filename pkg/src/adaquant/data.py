"""Bundled 10-class synthetic shapes dataset (32x32 grayscale).

Procedurally generated from a seed so runs need no network access or
downloads. Classes are simple geometric patterns with jittered position,
size and contrast, plus additive noise.
"""
from __future__ import annotations

import numpy as np

IMG = 32
NUM_CLASSES = 10

CLASS_NAMES = [
    "disc",
    "ring",
    "square",
    "frame",
    "plus",
    "diag_cross",
    "h_stripes",
    "v_stripes",
    "triangle",
    "checker",
]


def _grid():
    ys, xs = np.mgrid[0:IMG, 0:IMG]
    return ys.astype(np.float32), xs.astype(np.float32)


def _draw(label: int, rng: np.random.Generator) -> np.ndarray:
    ys, xs = _grid()
    cy = 15.5 + rng.uniform(-3, 3)
    cx = 15.5 + rng.uniform(-3, 3)
    r = rng.uniform(6, 10)
    dy, dx = ys - cy, xs - cx
    dist = np.sqrt(dy**2 + dx**2)

    if label == 0:  # filled disc
        img = (dist <= r).astype(np.float32)
    elif label == 1:  # ring
        img = ((dist <= r) & (dist >= r - 2.5)).astype(np.float32)
    elif label == 2:  # filled square
        img = ((np.abs(dy) <= r * 0.8) & (np.abs(dx) <= r * 0.8)).astype(np.float32)
    elif label == 3:  # square frame
        inside = (np.abs(dy) <= r * 0.8) & (np.abs(dx) <= r * 0.8)
        inner = (np.abs(dy) <= r * 0.8 - 2.5) & (np.abs(dx) <= r * 0.8 - 2.5)
        img = (inside & ~inner).astype(np.float32)
    elif label == 4:  # plus
        img = (
            ((np.abs(dy) <= 2) & (np.abs(dx) <= r))
            | ((np.abs(dx) <= 2) & (np.abs(dy) <= r))
        ).astype(np.float32)
    elif label == 5:  # diagonal cross
        img = (
            ((np.abs(dy - dx) <= 2.5) | (np.abs(dy + dx) <= 2.5))
            & (dist <= r * 1.2)
        ).astype(np.float32)
    elif label == 6:  # horizontal stripes
        period = rng.uniform(6, 9)
        phase = rng.uniform(0, period)
        img = (np.mod(ys + phase, period) < period / 2).astype(np.float32)
    elif label == 7:  # vertical stripes
        period = rng.uniform(6, 9)
        phase = rng.uniform(0, period)
        img = (np.mod(xs + phase, period) < period / 2).astype(np.float32)
    elif label == 8:  # filled triangle, apex up
        h = r * 1.4
        img = ((dy >= -h / 2) & (dy <= h / 2) & (np.abs(dx) <= (dy + h / 2) * 0.6)).astype(
            np.float32
        )
    else:  # checkerboard
        cell = rng.uniform(4, 6)
        img = (
            (np.mod(ys, 2 * cell) < cell) ^ (np.mod(xs, 2 * cell) < cell)
        ).astype(np.float32)

    contrast = rng.uniform(0.6, 1.0)
    background = rng.uniform(0.0, 0.15)
    img = background + contrast * img
    img = img + rng.normal(0.0, 0.06, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_dataset(count: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Balanced samples: images [count,1,32,32] in [0,1], labels int64 [count]."""
    rng = np.random.default_rng(seed)
    labels = np.arange(count, dtype=np.int64) % NUM_CLASSES
    rng.shuffle(labels)
    images = np.empty((count, 1, IMG, IMG), dtype=np.float32)
    for i, lab in enumerate(labels):
        images[i, 0] = _draw(int(lab), rng)
    return images, labels


def batches(
    x: np.ndarray, y: np.ndarray, batch_size: int, rng: np.random.Generator | None = None
):
    """Yield (x, y) slices; shuffles when an rng is given."""
    idx = np.arange(len(x))
    if rng is not None:
        rng.shuffle(idx)
    for start in range(0, len(x), batch_size):
        sel = idx[start : start + batch_size]
        yield x[sel], y[sel]
