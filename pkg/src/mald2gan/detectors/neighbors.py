from __future__ import annotations

import numpy as np

from .base import Classifier

_CHUNK = 256


def hamming(Q: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Pairwise Hamming distances between binary rows of ``Q`` and ``T``."""
    Qf = Q.astype(np.float32)
    Tf = T.astype(np.float32)
    common = Qf @ Tf.T
    d = Qf.sum(axis=1)[:, None] + Tf.sum(axis=1)[None, :] - 2.0 * common
    return np.rint(d).astype(np.int64)


def nearest(Q: np.ndarray, T: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest training rows per query, nearest first.

    Distance ties go to the lower training index.
    """
    n = len(T)
    k = min(k, n)
    out = np.empty((len(Q), k), dtype=np.int64)
    ar = np.arange(n, dtype=np.int64)
    for start in range(0, len(Q), _CHUNK):
        key = hamming(Q[start:start + _CHUNK], T) * n + ar
        part = np.argpartition(key, k - 1, axis=1)[:, :k]
        order = np.argsort(np.take_along_axis(key, part, axis=1), axis=1)
        out[start:start + _CHUNK] = np.take_along_axis(part, order, axis=1)
    return out


class KNearestNeighbors(Classifier):
    """Majority of the k Hamming-nearest training points (fraction malware)."""

    kind = "KNN"
    defaults = {"k": 5}

    def _fit(self, X, y, rng):
        self.X_ = X.copy()
        self.y_ = y.copy()

    def _proba(self, X):
        idx = nearest(np.asarray(X), self.X_, self.params["k"])
        return self.y_[idx].mean(axis=1)

    def payload(self):
        return {}, {"X": self.X_, "y": self.y_}

    def load_payload(self, meta, blocks):
        self.X_ = blocks["X"].astype(np.uint8)
        self.y_ = blocks["y"].astype(np.uint8)
