from __future__ import annotations

import numpy as np

from ..dataset import DatasetError, LabeledDataset

DEFAULT_THRESHOLD = 0.5


class Classifier:
    """Common surface of every black-box detector.

    Subclasses implement ``_fit``, ``_proba`` and the payload hooks used by
    persistence. ``predict`` is strict: a probability of exactly the
    threshold is benign.
    """

    kind: str = ""
    defaults: dict = {}

    def __init__(self, params: dict | None = None, threshold: float = DEFAULT_THRESHOLD):
        unknown = set(params or {}) - set(self.defaults)
        if unknown:
            raise ValueError(f"{self.kind}: unknown hyperparameters {sorted(unknown)}")
        self.params = {**self.defaults, **(params or {})}
        self.threshold = threshold
        self.n_features: int | None = None

    def fit(self, data: LabeledDataset, seed: int = 0):
        if len(data) == 0:
            raise DatasetError("cannot fit on an empty dataset")
        if len(np.unique(data.y)) < 2:
            raise DatasetError("training data must contain both benign and malware samples")
        self.n_features = data.n_features
        self._fit(data.X, data.y, np.random.default_rng(seed))
        return self

    def _check_X(self, X) -> np.ndarray:
        if self.n_features is None:
            raise RuntimeError(f"{self.kind} model is not fitted")
        X = np.asarray(X)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DatasetError(f"{self.kind}: input has {X.shape[-1]} features, "
                               f"model was trained on {self.n_features}")
        return X

    def predict_proba(self, X) -> np.ndarray:
        X = self._check_X(X)
        if len(X) == 0:
            return np.zeros(0)
        return np.clip(self._proba(X), 0.0, 1.0)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) > self.threshold).astype(np.uint8)

    # hooks -------------------------------------------------------------
    def _fit(self, X, y, rng):
        raise NotImplementedError

    def _proba(self, X):
        raise NotImplementedError

    def payload(self) -> tuple[dict, dict[str, np.ndarray]]:
        raise NotImplementedError

    def load_payload(self, meta: dict, blocks: dict[str, np.ndarray]) -> None:
        raise NotImplementedError
