from __future__ import annotations

import numpy as np

from .. import numnet
from .base import Classifier


class MultilayerPerceptron(Classifier):
    """One ReLU hidden layer, sigmoid output, BCE loss and Adam."""

    kind = "MLP"
    defaults = {"hidden": 64, "epochs": 30, "batch_size": 64, "learning_rate": 1e-3}

    def _fit(self, X, y, rng):
        p = self.params
        self.net_ = numnet.dense_stack([X.shape[1], p["hidden"], 1], numnet.ReLU,
                                       numnet.Sigmoid, rng)
        opt = numnet.Adam(p["learning_rate"])
        Xf = X.astype(np.float64)
        T = y.astype(np.float64)[:, None]
        n = len(y)
        for _ in range(p["epochs"]):
            order = rng.permutation(n)
            for start in range(0, n, p["batch_size"]):
                rows = order[start:start + p["batch_size"]]
                numnet.train_batch(self.net_, opt, numnet.BCE, Xf[rows], T[rows])

    def _proba(self, X):
        return self.net_(np.asarray(X, dtype=np.float64))[:, 0]

    def payload(self):
        layers, blocks = numnet.network_blocks(self.net_, "net.")
        return {"layers": layers}, blocks

    def load_payload(self, meta, blocks):
        self.net_ = numnet.network_from_blocks(meta["layers"], blocks, "net.")
