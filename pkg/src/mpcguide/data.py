"""Labeled isotropic Gaussian mixtures used as training data."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MixtureDataset:
    means: np.ndarray  # (C, dim)
    stds: np.ndarray  # (C,)
    class_probs: np.ndarray  # (C,)
    x: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        C = len(self.means)
        self.stds = np.broadcast_to(np.asarray(self.stds, dtype=np.float64), (C,)).copy()
        self.class_probs = np.asarray(self.class_probs, dtype=np.float64)
        if self.class_probs.shape != (C,):
            raise ValueError(f"class_probs shape {self.class_probs.shape} != ({C},)")
        if abs(self.class_probs.sum() - 1.0) > 1e-12 or (self.class_probs < 0).any():
            raise ValueError("class_probs must be a probability vector")
        if (self.stds <= 0).any():
            raise ValueError("component stds must be positive")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= C):
            raise ValueError("sample labels must index a mixture component")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def num_classes(self) -> int:
        return len(self.means)

    def draw(self, n: int, rng: np.random.Generator, label: int | None = None):
        """Draw ``n`` labeled points (all from component ``label`` if given)."""
        if label is None:
            labels = rng.choice(self.num_classes, size=n, p=self.class_probs)
        else:
            labels = np.full(n, int(label))
        noise = rng.standard_normal((n, self.dim))
        x = self.means[labels] + self.stds[labels, None] * noise
        return x, labels

    def with_samples(self, n: int, rng: np.random.Generator) -> "MixtureDataset":
        x, labels = self.draw(n, rng)
        return MixtureDataset(self.means, self.stds, self.class_probs, x, labels)

    def analytic(self, sched):
        from .oracle import AnalyticMixture

        return AnalyticMixture(self.means, self.stds, self.class_probs, sched)

    def params(self) -> dict:
        return {
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
            "class_probs": self.class_probs.tolist(),
        }


def circle_mixture(num_classes: int = 4, radius: float = 4.0, std: float = 0.3) -> MixtureDataset:
    """Equiprobable 2-D components evenly spaced on a circle."""
    if num_classes < 1:
        raise ValueError("need at least one component")
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return MixtureDataset(means, np.full(num_classes, std), np.full(num_classes, 1.0 / num_classes))


def single_gaussian(mean=(1.0, -0.5), std: float = 0.5) -> MixtureDataset:
    return MixtureDataset(np.asarray([mean], dtype=np.float64), [std], [1.0])


def sphere_mixture(num_classes: int = 4, dim: int = 16, radius: float = 4.0, std: float = 0.3,
                   seed: int = 0) -> MixtureDataset:
    """Equiprobable components with means drawn uniformly on a sphere of ``radius``."""
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((num_classes, dim))
    means *= radius / np.linalg.norm(means, axis=1, keepdims=True)
    return MixtureDataset(means, np.full(num_classes, std), np.full(num_classes, 1.0 / num_classes))
