"""Synthetic image classification data for desk-scale runs."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from lavit.config import ModelConfig


@dataclass(frozen=True)
class SyntheticDataset:
    """Class ``c`` is a 2D sinusoid whose orientation and frequency depend on ``c``,
    plus Gaussian noise, clipped to [0, 1]. Fully determined by ``seed``."""

    image_size: tuple[int, int]
    channels: int
    num_classes: int
    seed: int = 0
    noise: float = 0.1
    train_size: int = 512

    def pattern(self, c: int) -> np.ndarray:
        h, w = self.image_size
        angle = math.pi * c / self.num_classes
        freq = 2.0 + (c % 3)
        yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
        wave = np.sin(2.0 * math.pi * freq * (xx * math.cos(angle) + yy * math.sin(angle)))
        img = 0.5 + 0.5 * wave
        return np.broadcast_to(img, (self.channels, h, w))

    def _rng(self, *stream: int) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *stream])))

    def make(self, labels: np.ndarray, stream: int) -> np.ndarray:
        rng = self._rng(stream)
        base = np.stack([self.pattern(int(c)) for c in labels])
        noisy = base + self.noise * rng.standard_normal(base.shape)
        return np.clip(noisy, 0.0, 1.0)

    def train_set(self) -> tuple[np.ndarray, np.ndarray]:
        labels = np.arange(self.train_size) % self.num_classes
        return self.make(labels, 0), labels

    def probe_batch(self, size: int = 16) -> tuple[np.ndarray, np.ndarray]:
        """Fixed held-out batch (its noise stream is disjoint from training)."""
        labels = np.arange(size) % self.num_classes
        return self.make(labels, 1), labels

    def batches(self, batch_size: int):
        """Endless shuffled minibatches; every epoch visits each class equally."""
        x, y = self.train_set()
        n = len(y)
        epoch = 0
        while True:
            order = self._rng(2, epoch).permutation(n)
            for start in range(0, n - batch_size + 1, batch_size):
                idx = order[start:start + batch_size]
                yield x[idx], y[idx]
            epoch += 1


def make_synthetic(config: ModelConfig, seed: int = 0, noise: float = 0.1,
                   train_size: int = 512) -> SyntheticDataset:
    if config.num_classes < 2:
        raise ValueError("synthetic data needs at least 2 classes")
    return SyntheticDataset(config.image_size, config.in_channels, config.num_classes,
                            seed=seed, noise=noise, train_size=train_size)
