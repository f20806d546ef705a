"""Deterministic in-repo toy corpora.

``shapes``: 8x8 single-channel images in [-1, 1]. Class 0 holds straight
bars (horizontal, vertical or diagonal), class 1 holds crosses and disks.

``gmm``: 2-D points from an 8-component Gaussian mixture on a circle,
stored as ``2 x 1 x 1`` "images" so the same networks apply. The class
label is the component index parity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_CLASSES = 2


@dataclass(frozen=True)
class Dataset:
    name: str
    images: np.ndarray  # n x c x h x w
    labels: np.ndarray  # n, ints in [0, N_CLASSES)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def __len__(self) -> int:
        return len(self.images)

    def batch(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.integers(0, len(self), size)
        return self.images[idx], self.labels[idx]


def _bar(rng, size):
    img = np.full((size, size), -1.0)
    kind = rng.integers(0, 3)
    pos = rng.integers(1, size - 1)
    width = rng.integers(1, 3)
    if kind == 0:
        img[pos : pos + width, :] = 1.0
    elif kind == 1:
        img[:, pos : pos + width] = 1.0
    else:
        yy, xx = np.mgrid[:size, :size]
        img[np.abs(yy - xx - (pos - size // 2)) < width] = 1.0
    return img


def _cross_or_disk(rng, size):
    img = np.full((size, size), -1.0)
    cy, cx = rng.uniform(2.5, size - 3.5, 2)
    yy, xx = np.mgrid[:size, :size]
    if rng.integers(0, 2) == 0:
        r = rng.uniform(1.5, 2.8)
        img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 1.0
    else:
        arm = rng.integers(2, 4)
        iy, ix = int(round(cy)), int(round(cx))
        img[iy, max(ix - arm, 0) : ix + arm + 1] = 1.0
        img[max(iy - arm, 0) : iy + arm + 1, ix] = 1.0
    return img


def shapes_corpus(n: int = 2048, size: int = 8, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % N_CLASSES
    images = np.stack([_bar(rng, size) if c == 0 else _cross_or_disk(rng, size) for c in labels])
    return Dataset("shapes", images[:, None].astype(np.float64), labels.astype(np.int64))


def gmm_corpus(n: int = 4096, components: int = 8, radius: float = 0.8, std: float = 0.08, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    comp = rng.integers(0, components, n)
    angle = 2 * np.pi * comp / components
    centers = radius * np.stack([np.cos(angle), np.sin(angle)], axis=1)
    points = centers + std * rng.standard_normal((n, 2))
    return Dataset("gmm", points[:, :, None, None], (comp % N_CLASSES).astype(np.int64))


CORPORA = {"shapes": shapes_corpus, "gmm": gmm_corpus}


def load_corpus(name: str, seed: int = 0, n: int | None = None) -> Dataset:
    try:
        factory = CORPORA[name]
    except KeyError:
        raise ValueError(f"unknown corpus {name!r}; choose from {sorted(CORPORA)}") from None
    return factory(seed=seed) if n is None else factory(n=n, seed=seed)
