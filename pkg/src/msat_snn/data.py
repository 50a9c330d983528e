"""Labeled datasets and the synthetic blob generator used by the desk-scale experiments."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import InputError


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray  # (N, d) float64, row-major
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        if self.features.ndim != 2:
            raise InputError(f"features must be 2-D (samples x features), got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise InputError(f"{self.features.shape[0]} feature rows but labels have shape {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> "LabeledDataset":
        return LabeledDataset(self.features[index], self.labels[index], self.num_classes)

    def fingerprint(self) -> str:
        """sha256 over the float64 features and int64 labels."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()


def make_blobs(n: int, num_classes: int = 4, std: float = 1.0, radius: float = 3.0,
               seed: int = 0, num_features: int = 2) -> LabeledDataset:
    """Isotropic Gaussian blobs with centers evenly spaced on a circle.

    Classes are assigned round-robin, so every class gets ``n // num_classes``
    or one more samples.  Extra feature dimensions (beyond 2) are pure noise.
    """
    if n < 1 or num_classes < 1:
        raise InputError("make_blobs needs n >= 1 and num_classes >= 1")
    if num_features < 2:
        raise InputError("make_blobs needs at least 2 features")
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(num_classes) / num_classes + np.pi / 4
    centers = np.zeros((num_classes, num_features))
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1] = radius * np.sin(angles)
    labels = rng.permutation(np.arange(n) % num_classes)
    features = centers[labels] + std * rng.standard_normal((n, num_features))
    return LabeledDataset(np.ascontiguousarray(features, dtype=np.float64), labels.astype(np.int64), num_classes)
