"""Plain containers shared by the loaders, the condensation engine and evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Dataset:
    """Normalized train/test splits with the per-channel constants used."""

    name: str
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    num_classes: int

    @property
    def channels(self) -> int:
        return self.train_x.shape[1]

    @property
    def im_size(self) -> tuple[int, int]:
        return tuple(self.train_x.shape[2:])

    def class_indices(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.train_y == c) for c in range(self.num_classes)]

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        """Inverse of the normalization, in [0, 1] pixel units (not clamped)."""
        return np.asarray(x, np.float64) * self.std.reshape(1, -1, 1, 1) + self.mean.reshape(1, -1, 1, 1)

    def subset(self, train: int | None = None, test: int | None = None, seed: int = 0) -> "Dataset":
        """Class-stratified subsample of each split, for desk-scale runs."""
        rng = np.random.default_rng(seed)

        def pick(y, n):
            if n is None or n >= len(y):
                return np.arange(len(y))
            per = n // self.num_classes
            idx = [rng.permutation(np.flatnonzero(y == c))[:per] for c in range(self.num_classes)]
            return np.sort(np.concatenate(idx))

        tr, te = pick(self.train_y, train), pick(self.test_y, test)
        return Dataset(self.name, self.train_x[tr], self.train_y[tr], self.test_x[te], self.test_y[te],
                       self.mean, self.std, self.num_classes)


@dataclass
class SyntheticSet:
    """Learned images with fixed, evenly assigned labels (class-major order)."""

    images: np.ndarray
    labels: np.ndarray
    ipc: int
    num_classes: int
    init: str = "real"
    seed: int = 0
    config: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def class_slice(self, c: int) -> slice:
        return slice(c * self.ipc, (c + 1) * self.ipc)

    def copy(self) -> "SyntheticSet":
        return SyntheticSet(self.images.copy(), self.labels.copy(), self.ipc, self.num_classes, self.init,
                            self.seed, dict(self.config), list(self.trace),
                            None if self.mean is None else self.mean.copy(),
                            None if self.std is None else self.std.copy())


def even_labels(num_classes: int, ipc: int) -> np.ndarray:
    return np.repeat(np.arange(num_classes, dtype=np.int64), ipc)
