"""The eight black-box detectors behind one train/predict/persist interface."""

from __future__ import annotations

import numpy as np

from .. import container
from ..dataset import DatasetError, LabeledDataset
from .base import DEFAULT_THRESHOLD, Classifier
from .boosting import AdaBoost, GradientBoosting
from .linear import LinearSVM, LogisticRegression
from .mlp import MultilayerPerceptron
from .neighbors import KNearestNeighbors
from .trees import DecisionTree, RandomForest

KINDS = ("RF", "LR", "DT", "SVM", "MLP", "AB", "GB", "KNN")

_REGISTRY: dict[str, type[Classifier]] = {
    cls.kind: cls for cls in (RandomForest, LogisticRegression, DecisionTree, LinearSVM,
                              MultilayerPerceptron, AdaBoost, GradientBoosting,
                              KNearestNeighbors)
}


def model_class(kind: str) -> type[Classifier]:
    try:
        return _REGISTRY[kind]
    except KeyError:
        raise ValueError(f"unknown detector kind {kind!r}; expected one of {KINDS}") from None


def fit(kind: str, data: LabeledDataset, params: dict | None = None, seed: int = 0,
        threshold: float = DEFAULT_THRESHOLD) -> Classifier:
    return model_class(kind)(params, threshold).fit(data, seed)


def predict_proba(model: Classifier, X) -> np.ndarray:
    return model.predict_proba(X)


def predict(model: Classifier, X) -> np.ndarray:
    return model.predict(X)


def true_positive_rate(model: Classifier, malware_X) -> float:
    """Fraction of (ground-truth malicious) rows the model flags as malware."""
    malware_X = np.asarray(malware_X)
    if malware_X.ndim != 2 or len(malware_X) == 0:
        raise DatasetError("true_positive_rate needs at least one malware row")
    return float(model.predict(malware_X).mean())


def save_model(model: Classifier, path) -> None:
    meta, blocks = model.payload()
    header = {"kind": model.kind, "params": model.params, "threshold": model.threshold,
              "n_features": model.n_features, "payload": meta}
    container.write(path, "classifier", header, blocks)


def load_model(path) -> Classifier:
    _, header, blocks = container.read(path, expected_kind="classifier")
    try:
        model = model_class(header["kind"])(header["params"], header["threshold"])
        model.n_features = header["n_features"]
        model.load_payload(header["payload"], blocks)
    except (KeyError, ValueError) as exc:
        raise container.ContainerError(f"classifier payload is incomplete: {exc}") from exc
    return model


__all__ = ["KINDS", "Classifier", "LabeledDataset", "fit", "predict", "predict_proba",
           "true_positive_rate", "save_model", "load_model", "model_class", "AdaBoost",
           "DecisionTree", "GradientBoosting", "KNearestNeighbors", "LinearSVM",
           "LogisticRegression", "MultilayerPerceptron", "RandomForest"]
