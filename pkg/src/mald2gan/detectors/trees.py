"""CART on binary features, and a bagged forest of them.

With 0/1 inputs every split is ``x[j] == 1`` so a tree is stored as four flat
arrays: split feature (-1 at leaves), left child (x == 0), right child
(x == 1) and the malware fraction at the node.
"""

from __future__ import annotations

import math

import numpy as np

from .base import Classifier


class Tree:
    def __init__(self, feature, left, right, value):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=np.float64)

    @property
    def n_nodes(self):
        return len(self.feature)

    def depth(self):
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())


def _split_cost(Xs: np.ndarray, ys: np.ndarray, n: int, pos: float):
    """Weighted Gini (count-scaled) of splitting on each column of ``Xs``."""
    n1 = Xs.sum(axis=0)
    p1 = ys @ Xs
    n0 = n - n1
    p0 = pos - p1
    valid = (n1 > 0) & (n0 > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        cost = (n1 - (p1 * p1 + (n1 - p1) ** 2) / n1) + (n0 - (p0 * p0 + (n0 - p0) ** 2) / n0)
    return np.where(valid, cost, np.inf)


def grow_tree(Xf: np.ndarray, y: np.ndarray, idx: np.ndarray, max_features: int | None,
              rng: np.random.Generator, min_samples_split: int = 2, max_depth: int | None = None,
              importances: np.ndarray | None = None) -> Tree:
    """Grow a Gini CART on rows ``idx`` of ``Xf`` (float 0/1 matrix).

    ``max_features`` columns are sampled per node (all when None). If none of
    the sampled columns can split the node, every column is tried. Equal
    costs resolve to the lower feature index. ``importances`` accumulates the
    count-weighted impurity decrease per feature.
    """
    M = Xf.shape[1]
    yf = y.astype(np.float64)
    feature, left, right, value = [], [], [], []

    def new_node(rows):
        feature.append(-1)
        left.append(-1)
        right.append(-1)
        value.append(float(yf[rows].mean()))
        return len(feature) - 1

    stack = [(new_node(idx), idx, 0)]
    while stack:
        node, rows, depth = stack.pop()
        n = len(rows)
        pos = float(yf[rows].sum())
        if pos == 0 or pos == n or n < min_samples_split:
            continue
        if max_depth is not None and depth >= max_depth:
            continue
        ys = yf[rows]
        best = -1
        if max_features is not None and max_features < M:
            cand = np.sort(rng.choice(M, size=max_features, replace=False))
            cost = _split_cost(Xf[np.ix_(rows, cand)], ys, n, pos)
            j = int(np.argmin(cost))
            if np.isfinite(cost[j]):
                best, best_cost = int(cand[j]), cost[j]
        if best < 0:
            cost = _split_cost(Xf[rows], ys, n, pos)
            j = int(np.argmin(cost))
            if not np.isfinite(cost[j]):
                continue  # every column constant here: conflicting duplicates
            best, best_cost = j, cost[j]
        if importances is not None:
            parent = n - (pos * pos + (n - pos) ** 2) / n
            importances[best] += parent - best_cost
        mask = Xf[rows, best] > 0.5
        r_rows, l_rows = rows[mask], rows[~mask]
        feature[node] = best
        left[node] = new_node(l_rows)
        right[node] = new_node(r_rows)
        stack.append((right[node], r_rows, depth + 1))
        stack.append((left[node], l_rows, depth + 1))
    return Tree(feature, left, right, value)


class Forest:
    """Several trees packed into shared arrays for batched traversal."""

    def __init__(self, trees: list[Tree]):
        offsets = np.cumsum([0] + [t.n_nodes for t in trees])
        self.roots = offsets[:-1]
        self.feature = np.concatenate([t.feature for t in trees])
        self.left = np.concatenate([t.left + o for t, o in zip(trees, offsets)])
        self.right = np.concatenate([t.right + o for t, o in zip(trees, offsets)])
        leaf = self.feature < 0
        self.left[leaf] = -1
        self.right[leaf] = -1
        self.value = np.concatenate([t.value for t in trees])

    def leaf_values(self, X) -> np.ndarray:
        """(n_trees, n_rows) leaf malware fractions."""
        Xb = np.asarray(X) > 0.5
        n = len(Xb)
        node = np.repeat(self.roots[:, None], n, axis=1)
        cols = np.broadcast_to(np.arange(n), node.shape)
        while True:
            f = self.feature[node]
            active = f >= 0
            if not active.any():
                break
            a_node = node[active]
            go_right = Xb[cols[active], f[active]]
            node[active] = np.where(go_right, self.right[a_node], self.left[a_node])
        return self.value[node]

    def to_blocks(self, prefix):
        return {prefix + "roots": self.roots, prefix + "feature": self.feature,
                prefix + "left": self.left, prefix + "right": self.right,
                prefix + "value": self.value}

    @classmethod
    def from_blocks(cls, blocks, prefix):
        f = cls.__new__(cls)
        f.roots = blocks[prefix + "roots"]
        f.feature = blocks[prefix + "feature"]
        f.left = blocks[prefix + "left"]
        f.right = blocks[prefix + "right"]
        f.value = blocks[prefix + "value"]
        return f


class DecisionTree(Classifier):
    kind = "DT"
    defaults = {"max_depth": None, "min_samples_split": 2}

    def _fit(self, X, y, rng):
        Xf = X.astype(np.float64)
        self.importances_ = np.zeros(X.shape[1])
        tree = grow_tree(Xf, y, np.arange(len(y)), None, rng,
                         self.params["min_samples_split"], self.params["max_depth"],
                         self.importances_)
        self.tree_ = tree
        self.forest_ = Forest([tree])

    def _proba(self, X):
        return self.forest_.leaf_values(X)[0]

    def payload(self):
        return {}, self.forest_.to_blocks("tree.")

    def load_payload(self, meta, blocks):
        self.forest_ = Forest.from_blocks(blocks, "tree.")


class RandomForest(Classifier):
    """Bootstrap-bagged Gini trees; probability is the mean leaf fraction."""

    kind = "RF"
    defaults = {"n_estimators": 100, "max_features": "sqrt", "max_depth": None,
                "min_samples_split": 2}

    def _max_features(self, M):
        mf = self.params["max_features"]
        if mf == "sqrt":
            return max(1, int(math.isqrt(M)))
        if mf is None:
            return M
        return int(mf)

    def _fit(self, X, y, rng):
        Xf = X.astype(np.float64)
        n, M = X.shape
        k = self._max_features(M)
        importances = np.zeros(M)
        trees = []
        for _ in range(self.params["n_estimators"]):
            boot = rng.integers(0, n, size=n)
            # a single-class bootstrap is still a valid (constant) tree
            imp = np.zeros(M)
            trees.append(grow_tree(Xf, y, boot, k, rng, self.params["min_samples_split"],
                                   self.params["max_depth"], imp))
            total = imp.sum()
            if total > 0:
                importances += imp / total
        self.importances_ = importances / self.params["n_estimators"]
        self.forest_ = Forest(trees)

    def _proba(self, X):
        return self.forest_.leaf_values(X).mean(axis=0)

    def payload(self):
        return {}, {**self.forest_.to_blocks("forest."), "importances": self.importances_}

    def load_payload(self, meta, blocks):
        self.forest_ = Forest.from_blocks(blocks, "forest.")
        self.importances_ = blocks["importances"]
