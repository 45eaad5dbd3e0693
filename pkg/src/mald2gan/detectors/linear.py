from __future__ import annotations

import numpy as np

from ..numnet import sigmoid
from .base import Classifier


class LogisticRegression(Classifier):
    """Logistic regression by full-batch gradient descent on the mean log-loss."""

    kind = "LR"
    defaults = {"iterations": 500, "learning_rate": 0.1}

    def _fit(self, X, y, rng):
        Xf = X.astype(np.float64)
        yf = y.astype(np.float64)
        n, M = Xf.shape
        w = np.zeros(M)
        b = 0.0
        lr = self.params["learning_rate"]
        for _ in range(self.params["iterations"]):
            err = sigmoid(Xf @ w + b) - yf
            w -= lr * (Xf.T @ err) / n
            b -= lr * err.mean()
        self.coef_ = w
        self.intercept_ = b

    def _proba(self, X):
        return sigmoid(np.asarray(X, dtype=np.float64) @ self.coef_ + self.intercept_)

    def payload(self):
        return {"intercept": self.intercept_}, {"coef": self.coef_}

    def load_payload(self, meta, blocks):
        self.intercept_ = meta["intercept"]
        self.coef_ = blocks["coef"]


class LinearSVM(Classifier):
    """L2-regularized hinge loss by minibatch SGD, with Platt-scaled scores.

    The margin ``w.x + b`` is mapped to a probability through
    ``sigmoid(a * margin + c)`` where ``a, c`` are fit by Newton's method on
    the training margins.
    """

    kind = "SVM"
    defaults = {"epochs": 10, "lam": 1e-4, "learning_rate": 0.01, "batch_size": 32}

    def _fit(self, X, y, rng):
        Xf = X.astype(np.float64)
        s = 2.0 * y.astype(np.float64) - 1.0
        n, M = Xf.shape
        w = np.zeros(M)
        b = 0.0
        lam = self.params["lam"]
        lr = self.params["learning_rate"]
        bs = self.params["batch_size"]
        for _ in range(self.params["epochs"]):
            order = rng.permutation(n)
            for start in range(0, n, bs):
                rows = order[start:start + bs]
                xb, sb = Xf[rows], s[rows]
                viol = sb * (xb @ w + b) < 1.0
                gw = lam * w - (sb[viol] @ xb[viol]) / len(rows)
                gb = -sb[viol].sum() / len(rows)
                w -= lr * gw
                b -= lr * gb
        self.coef_ = w
        self.intercept_ = b
        self.platt_ = _platt(Xf @ w + b, y.astype(np.float64))

    def decision_function(self, X):
        return np.asarray(X, dtype=np.float64) @ self.coef_ + self.intercept_

    def _proba(self, X):
        a, c = self.platt_
        return sigmoid(a * self.decision_function(X) + c)

    def payload(self):
        return {"intercept": self.intercept_}, {"coef": self.coef_,
                                                "platt": np.asarray(self.platt_)}

    def load_payload(self, meta, blocks):
        self.intercept_ = meta["intercept"]
        self.coef_ = blocks["coef"]
        self.platt_ = tuple(blocks["platt"])


def _platt(margin, y, iterations=50):
    # Newton on the 2-parameter logistic fit; small ridge keeps separable data finite
    a, c = 1.0, 0.0
    for _ in range(iterations):
        p = sigmoid(a * margin + c)
        g = np.array([(p - y) @ margin + 1e-3 * a, (p - y).sum()])
        h = p * (1.0 - p)
        H = np.array([[h @ (margin * margin) + 1e-3, h @ margin], [h @ margin, h.sum() + 1e-9]])
        step = np.linalg.solve(H, g)
        a, c = a - step[0], c - step[1]
        if np.abs(step).max() < 1e-10:
            break
    return float(a), float(c)
