"""Procedural stand-in for CIFAR-10, written in the same binary batch layout.

Each class pairs a dominant color blob (low-frequency cue) with an oriented
grating (high-frequency cue); position, phase, contrast and pixel noise vary
per image. Used for smoke runs when the real dataset is not at hand.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataio import TEST_FILES, TRAIN_FILES, encode_records
from .imgfreq import to_display_u8

_COLORS = np.array(
    [
        [0.9, 0.2, 0.2],
        [0.2, 0.8, 0.2],
        [0.2, 0.3, 0.9],
        [0.9, 0.8, 0.2],
        [0.8, 0.3, 0.8],
        [0.2, 0.8, 0.8],
        [0.95, 0.55, 0.1],
        [0.5, 0.5, 0.5],
        [0.55, 0.3, 0.1],
        [0.95, 0.95, 0.95],
    ]
)


def synthetic_images(n: int, seed: int, num_classes: int = 10) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float64)
    images = np.empty((n, 32, 32, 3))
    for i, c in enumerate(labels):
        cy, cx = rng.uniform(10, 22, size=2)
        radius = rng.uniform(6, 10)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))
        theta = np.pi * (c % 5) / 5 + rng.normal(0, 0.1)
        freq = (0.35 if c < 5 else 0.8) + rng.normal(0, 0.03)
        grating = np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + rng.uniform(0, 2 * np.pi))
        color = np.clip(_COLORS[c % len(_COLORS)] + rng.normal(0, 0.08, 3), 0, 1)
        background = rng.uniform(0.2, 0.6, 3)
        img = background + blob[..., None] * (color - background)
        img += rng.uniform(0.08, 0.18) * grating[..., None]
        img += rng.normal(0, 0.03, img.shape)
        images[i] = img
    return np.clip(images, 0, 1), labels


def write_synthetic_cifar(root: str | Path, n_train: int = 5000, n_test: int = 1000, seed: int = 0) -> Path:
    """Write ``data_batch_1..5.bin`` and ``test_batch.bin`` under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    images, labels = synthetic_images(n_train, seed)
    for fname, idx in zip(TRAIN_FILES, np.array_split(np.arange(n_train), len(TRAIN_FILES))):
        (root / fname).write_bytes(encode_records(labels[idx], to_display_u8(images[idx])))
    images, labels = synthetic_images(n_test, seed + 1)
    (root / TEST_FILES[0]).write_bytes(encode_records(labels, to_display_u8(images)))
    return root
