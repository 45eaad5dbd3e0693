"""Depth-1 boosting on binary features: SAMME AdaBoost and logistic gradient boosting."""

from __future__ import annotations

import numpy as np

from ..numnet import sigmoid
from .base import Classifier

_ERR_FLOOR = 1e-10


class AdaBoost(Classifier):
    """Two-class SAMME with decision stumps.

    A stump on feature ``j`` predicts ``label0`` when ``x[j] == 0`` and
    ``label1`` otherwise. The malware probability is the alpha-weighted
    fraction of stumps voting malware.
    """

    kind = "AB"
    defaults = {"n_estimators": 100}

    def _fit(self, X, y, rng):
        Xf = X.astype(np.float64)
        yf = y.astype(np.float64)
        n = len(y)
        w = np.full(n, 1.0 / n)
        feats, lab0, lab1, alphas = [], [], [], []
        for _ in range(self.params["n_estimators"]):
            wp, wn = w * yf, w * (1.0 - yf)
            pos1, neg1 = wp @ Xf, wn @ Xf
            pos0, neg0 = wp.sum() - pos1, wn.sum() - neg1
            err = np.minimum(pos1, neg1) + np.minimum(pos0, neg0)
            j = int(np.argmin(err))
            e = float(err[j]) / w.sum()
            if e >= 0.5:
                break
            e = max(e, _ERR_FLOOR)
            alpha = float(np.log((1.0 - e) / e))
            l0 = int(pos0[j] > neg0[j])
            l1 = int(pos1[j] > neg1[j])
            pred = np.where(Xf[:, j] > 0.5, l1, l0)
            miss = pred != y
            feats.append(j)
            lab0.append(l0)
            lab1.append(l1)
            alphas.append(alpha)
            w = w * np.exp(alpha * miss)
            w /= w.sum()
            if e <= _ERR_FLOOR:
                break
        self.feature_ = np.array(feats, dtype=np.int64)
        self.label0_ = np.array(lab0, dtype=np.int64)
        self.label1_ = np.array(lab1, dtype=np.int64)
        self.alpha_ = np.array(alphas, dtype=np.float64)

    def _proba(self, X):
        if len(self.alpha_) == 0:
            return np.full(len(X), 0.5)
        x = np.asarray(X)[:, self.feature_] > 0.5
        votes = np.where(x, self.label1_, self.label0_)
        return votes @ self.alpha_ / self.alpha_.sum()

    def payload(self):
        return {}, {"feature": self.feature_, "label0": self.label0_, "label1": self.label1_,
                    "alpha": self.alpha_}

    def load_payload(self, meta, blocks):
        self.feature_ = blocks["feature"]
        self.label0_ = blocks["label0"]
        self.label1_ = blocks["label1"]
        self.alpha_ = blocks["alpha"]


class GradientBoosting(Classifier):
    """Logistic-loss boosting of regression stumps with Newton leaf values."""

    kind = "GB"
    defaults = {"n_estimators": 100, "learning_rate": 0.1}

    def _fit(self, X, y, rng):
        Xf = X.astype(np.float64)
        yf = y.astype(np.float64)
        prior = yf.mean()
        self.init_ = float(np.log(prior / (1.0 - prior)))
        F = np.full(len(y), self.init_)
        lr = self.params["learning_rate"]
        feats, v0s, v1s = [], [], []
        n1 = Xf.sum(axis=0)
        n0 = len(y) - n1
        usable = (n1 > 0) & (n0 > 0)
        for _ in range(self.params["n_estimators"]):
            p = sigmoid(F)
            r = yf - p
            h = p * (1.0 - p)
            s1 = r @ Xf
            s0 = r.sum() - s1
            with np.errstate(divide="ignore", invalid="ignore"):
                gain = np.where(usable, s1 * s1 / n1 + s0 * s0 / n0, -np.inf)
            if not np.isfinite(gain).any():
                break
            j = int(np.argmax(gain))
            h1 = h @ Xf[:, j]
            h0 = h.sum() - h1
            v1 = float(s1[j] / max(h1, 1e-12))
            v0 = float(s0[j] / max(h0, 1e-12))
            F += lr * np.where(Xf[:, j] > 0.5, v1, v0)
            feats.append(j)
            v0s.append(v0)
            v1s.append(v1)
        self.feature_ = np.array(feats, dtype=np.int64)
        self.value0_ = np.array(v0s)
        self.value1_ = np.array(v1s)

    def decision_function(self, X):
        x = np.asarray(X)[:, self.feature_] > 0.5
        steps = np.where(x, self.value1_, self.value0_)
        return self.init_ + self.params["learning_rate"] * steps.sum(axis=1)

    def _proba(self, X):
        return sigmoid(self.decision_function(X))

    def payload(self):
        return {"init": self.init_}, {"feature": self.feature_, "value0": self.value0_,
                                      "value1": self.value1_}

    def load_payload(self, meta, blocks):
        self.init_ = meta["init"]
        self.feature_ = blocks["feature"]
        self.value0_ = blocks["value0"]
        self.value1_ = blocks["value1"]
