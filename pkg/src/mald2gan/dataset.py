from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BENIGN = 0
MALWARE = 1


class DatasetError(ValueError):
    pass


def as_binary_matrix(X, where: str = "features") -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 2:
        raise DatasetError(f"{where}: expected a 2-D matrix, got shape {X.shape}")
    if X.dtype != np.uint8 or X.size and X.max() > 1:
        if X.size and not np.all((X == 0) | (X == 1)):
            bad = np.argwhere((X != 0) & (X != 1))[0]
            raise DatasetError(f"{where}: non-binary value {X[tuple(bad)]!r} at row {bad[0]}, "
                               f"column {bad[1]}")
        X = X.astype(np.uint8)
    return X


@dataclass
class LabeledDataset:
    """Binary API-presence matrix ``X`` (n x M) with labels ``y`` (0 benign, 1 malware)."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = as_binary_matrix(self.X)
        y = np.asarray(self.y)
        if y.ndim != 1 or len(y) != len(self.X):
            raise DatasetError(f"labels have shape {y.shape}, expected ({len(self.X)},)")
        if y.size and not np.all((y == 0) | (y == 1)):
            raise DatasetError("labels must be 0 (benign) or 1 (malware)")
        self.y = y.astype(np.uint8)

    def __len__(self):
        return len(self.y)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def malware(self) -> np.ndarray:
        return self.X[self.y == MALWARE]

    @property
    def benign(self) -> np.ndarray:
        return self.X[self.y == BENIGN]

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.X[idx], self.y[idx])

    def concat(self, other: "LabeledDataset") -> "LabeledDataset":
        return LabeledDataset(np.vstack([self.X, other.X]), np.concatenate([self.y, other.y]))

    def __eq__(self, other):
        return (isinstance(other, LabeledDataset) and np.array_equal(self.X, other.X)
                and np.array_equal(self.y, other.y))
