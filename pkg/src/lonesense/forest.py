"""Deterministic random forest for binary targets.

Trees are grown best-first on Gini impurity decrease until the leaf budget is
spent, on a bootstrap sample, drawing ``floor(sqrt(p))`` candidate features at
every node. Each tree has its own RNG stream derived from ``(seed, tree
index)``, so the forest does not depend on training order.

The numba kernels below work on presorted column indices; a node's best split
on one feature is a single pass over the presorted order.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 1000
    max_leaf_nodes: int = 5
    # "max_leaf_nodes": at most ``max_leaf_nodes`` leaves per tree (default).
    # "min_samples_leaf": unbounded leaves, each holding >= ``max_leaf_nodes`` samples.
    leaf_rule: str = "max_leaf_nodes"
    max_features: int | None = None  # None -> floor(sqrt(p))
    bootstrap: bool = True
    seed: int = 0
    oob: bool = False

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_leaf_nodes < 2:
            raise ValueError("max_leaf_nodes must be >= 2")
        if self.leaf_rule not in ("max_leaf_nodes", "min_samples_leaf"):
            raise ValueError(f"unknown leaf_rule {self.leaf_rule!r}")


@njit(cache=True)
def _node_split(k, Xs, y, sorted_idx, weight, node_of, feats, min_leaf, tot_w, tot_pos):
    n = Xs.shape[1]
    parent = tot_w - (tot_pos * tot_pos + (tot_w - tot_pos) ** 2) / tot_w
    best_gain = 1e-12
    best_f = -1
    best_thr = 0.0
    for f in feats:
        wl = 0.0
        pl = 0.0
        prev = 0.0
        for j in range(n):
            i = sorted_idx[f, j]
            if node_of[i] != k:
                continue
            xi = Xs[f, j]
            if wl > 0.0 and xi > prev:
                wr = tot_w - wl
                pr = tot_pos - pl
                if wl >= min_leaf and wr >= min_leaf:
                    child = (wl - (pl * pl + (wl - pl) ** 2) / wl) + (wr - (pr * pr + (wr - pr) ** 2) / wr)
                    gain = parent - child
                    if gain > best_gain:
                        best_gain = gain
                        best_f = f
                        thr = prev + (xi - prev) / 2.0
                        best_thr = thr if thr < xi else prev
            wl += weight[i]
            pl += weight[i] * y[i]
            prev = xi
    return best_gain, best_f, best_thr


@njit(cache=True)
def _grow(X, Xs, y, sorted_idx, weight, feat_draws, max_leaves, min_leaf,
          feature, threshold, left, right, value, gain_out):
    n = X.shape[0]
    node_of = np.full(n, -1, dtype=np.int64)
    tot_w = 0.0
    tot_pos = 0.0
    for i in range(n):
        if weight[i] > 0:
            node_of[i] = 0
            tot_w += weight[i]
            tot_pos += weight[i] * y[i]
    max_nodes = feature.shape[0]
    node_w = np.zeros(max_nodes)
    node_pos = np.zeros(max_nodes)
    cand_gain = np.zeros(max_nodes)
    cand_f = np.full(max_nodes, -1, dtype=np.int64)
    cand_thr = np.zeros(max_nodes)
    is_leaf = np.zeros(max_nodes, dtype=np.bool_)

    node_w[0] = tot_w
    node_pos[0] = tot_pos
    is_leaf[0] = True
    g, f, t = _node_split(0, Xs, y, sorted_idx, weight, node_of, feat_draws[0], min_leaf, tot_w, tot_pos)
    cand_gain[0], cand_f[0], cand_thr[0] = g, f, t
    n_nodes = 1
    n_leaves = 1
    while n_leaves < max_leaves and n_nodes + 2 <= max_nodes:
        k = -1
        best = 0.0
        for node in range(n_nodes):
            if is_leaf[node] and cand_f[node] >= 0 and cand_gain[node] > best:
                best = cand_gain[node]
                k = node
        if k < 0:
            break
        f = cand_f[k]
        t = cand_thr[k]
        lo, hi = n_nodes, n_nodes + 1
        feature[k] = f
        threshold[k] = t
        left[k] = lo
        right[k] = hi
        gain_out[k] = cand_gain[k]
        is_leaf[k] = False
        is_leaf[lo] = True
        is_leaf[hi] = True
        for i in range(n):
            if node_of[i] == k:
                if X[i, f] <= t:
                    node_of[i] = lo
                    node_w[lo] += weight[i]
                    node_pos[lo] += weight[i] * y[i]
                else:
                    node_of[i] = hi
                    node_w[hi] += weight[i]
                    node_pos[hi] += weight[i] * y[i]
        for c in (lo, hi):
            g, f2, t2 = _node_split(c, Xs, y, sorted_idx, weight, node_of, feat_draws[c], min_leaf,
                                    node_w[c], node_pos[c])
            cand_gain[c], cand_f[c], cand_thr[c] = g, f2, t2
        n_nodes += 2
        n_leaves += 1
    for node in range(n_nodes):
        value[node] = node_pos[node] / node_w[node] if node_w[node] > 0 else 0.0
    return n_nodes


@njit(cache=True)
def _predict(X, feature, threshold, left, right, value):
    n_trees = feature.shape[0]
    m = X.shape[0]
    out = np.zeros((n_trees, m))
    for t in range(n_trees):
        for i in range(m):
            node = 0
            while feature[t, node] >= 0:
                if X[i, feature[t, node]] <= threshold[t, node]:
                    node = left[t, node]
                else:
                    node = right[t, node]
            out[t, i] = value[t, node]
    return out


@dataclass
class Forest:
    config: ForestConfig
    feature_names: list[str]
    center: np.ndarray
    scale: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray
    oob_score: np.ndarray | None = field(default=None, repr=False)
    oob_auc: float | None = None

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def n_leaves(self) -> np.ndarray:
        internal = (self.feature >= 0).sum(axis=1)
        return internal + 1

    def _transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        if np.isnan(X).any():
            raise ValueError("missing values must be imputed before prediction")
        return (X - self.center) / self.scale

    def tree_outputs(self, X) -> np.ndarray:
        return _predict(self._transform(X), self.feature, self.threshold, self.left, self.right, self.value)

    def predict_proba(self, X) -> np.ndarray:
        """Mean over trees of the class-1 fraction in the reached leaf."""
        return self.tree_outputs(X).mean(axis=0)

    def feature_importance(self) -> dict[str, float]:
        tally = np.zeros(self.n_features)
        mask = self.feature >= 0
        np.add.at(tally, self.feature[mask], self.gain[mask])
        total = tally.sum()
        return {n: float(v / total) if total else 0.0 for n, v in zip(self.feature_names, tally)}

    # ---- serialization

    def to_json(self) -> str:
        doc = {
            "format": "lonesense.forest",
            "version": FORMAT_VERSION,
            "config": asdict(self.config),
            "feature_names": list(self.feature_names),
            "center": self.center.tolist(),
            "scale": self.scale.tolist(),
            "trees": {
                "feature": self.feature.tolist(),
                "threshold": self.threshold.tolist(),
                "left": self.left.tolist(),
                "right": self.right.tolist(),
                "value": self.value.tolist(),
                "gain": self.gain.tolist(),
            },
        }
        return json.dumps(doc, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "Forest":
        doc = json.loads(text)
        if doc.get("format") != "lonesense.forest" or doc.get("version") != FORMAT_VERSION:
            raise ValueError("not a supported forest document")
        trees = doc["trees"]
        return cls(
            config=ForestConfig(**doc["config"]),
            feature_names=doc["feature_names"],
            center=np.array(doc["center"], dtype=float),
            scale=np.array(doc["scale"], dtype=float),
            feature=np.array(trees["feature"], dtype=np.int64),
            threshold=np.array(trees["threshold"], dtype=float),
            left=np.array(trees["left"], dtype=np.int64),
            right=np.array(trees["right"], dtype=np.int64),
            value=np.array(trees["value"], dtype=float),
            gain=np.array(trees["gain"], dtype=float),
        )


def _tree_rng(seed: int, tree: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, tree])


def train(X, y, cfg: ForestConfig | None = None, feature_names=None) -> Forest:
    cfg = cfg or ForestConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ValueError("X must be (n, p) with one label per row")
    n, p = X.shape
    if n < 2:
        raise ValueError("need at least two observations")
    if np.isnan(X).any():
        raise ValueError("training matrix has missing values")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be 0/1")
    if y.min() == y.max():
        raise ValueError("both classes must be present to train")
    names = list(feature_names) if feature_names is not None else [f"x{j}" for j in range(p)]
    if len(names) != p:
        raise ValueError("feature_names length does not match X")

    center = X.mean(axis=0)
    scale = X.std(axis=0, ddof=1)
    scale[~(scale > 0)] = 1.0
    Xn = (X - center) / scale
    sorted_idx = np.ascontiguousarray(np.argsort(Xn, axis=0, kind="stable").T.astype(np.int64))
    Xs = np.ascontiguousarray(np.take_along_axis(Xn.T, sorted_idx, axis=1))

    mtry = cfg.max_features or max(1, int(math.floor(math.sqrt(p))))
    mtry = min(mtry, p)
    if cfg.leaf_rule == "max_leaf_nodes":
        max_leaves, min_leaf = cfg.max_leaf_nodes, 1.0
    else:
        max_leaves, min_leaf = n, float(cfg.max_leaf_nodes)
    max_nodes = 2 * max_leaves - 1
    # random keys are assigned by feature name so column order does not matter
    canon = np.argsort(np.array(names, dtype=str), kind="stable")

    T = cfg.n_trees
    feature = np.full((T, max_nodes), -1, dtype=np.int64)
    threshold = np.zeros((T, max_nodes))
    left = np.full((T, max_nodes), -1, dtype=np.int64)
    right = np.full((T, max_nodes), -1, dtype=np.int64)
    value = np.zeros((T, max_nodes))
    gain = np.zeros((T, max_nodes))
    counts = np.zeros((T, n), dtype=np.uint16) if cfg.oob else None

    for t in range(T):
        rng = _tree_rng(cfg.seed, t)
        if cfg.bootstrap:
            weight = np.bincount(rng.integers(0, n, size=n), minlength=n).astype(float)
        else:
            weight = np.ones(n)
        keys = np.empty((max_nodes, p))
        keys[:, canon] = rng.random((max_nodes, p))
        draws = np.sort(np.argsort(keys, axis=1)[:, :mtry], axis=1).astype(np.int64)
        _grow(Xn, Xs, y, sorted_idx, weight, draws, max_leaves, min_leaf,
              feature[t], threshold[t], left[t], right[t], value[t], gain[t])
        if counts is not None:
            counts[t] = weight

    forest = Forest(cfg, names, center, scale, feature, threshold, left, right, value, gain)
    if counts is not None:
        outputs = _predict(Xn, feature, threshold, left, right, value)
        oob = counts == 0
        n_oob = oob.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            forest.oob_score = np.where(n_oob > 0, (outputs * oob).sum(axis=0) / n_oob, np.nan)
        have = n_oob > 0
        if have.any() and len(np.unique(y[have])) == 2:
            from .evaluation import auc

            forest.oob_auc = auc(forest.oob_score[have], y[have])
    return forest


def predict_proba(forest: Forest, x) -> np.ndarray | float:
    """Probability of class 1 for one row (returns float) or a matrix of rows."""
    x = np.asarray(x, dtype=float)
    out = forest.predict_proba(x)
    return float(out[0]) if x.ndim == 1 else out
