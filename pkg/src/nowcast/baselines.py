"""Comparison forecasters: persistence, per-pixel ridge regression, per-pixel random forest.

The regression baselines see each pixel independently: a row holds the pixel's
``n_in`` past values (model space) and its ``n_out`` future values. One model
is shared by all pixel locations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .grid import inverse_transform, transform


def bm_forecast(x, n_out: int = 3):
    """Repeat the last input frame ``n_out`` times. Time is axis -3."""
    x = np.asarray(x)
    last = x[..., -1:, :, :]
    return np.repeat(last, n_out, axis=-3)


def pixel_rows(x) -> np.ndarray:
    """[S, T, H, W] -> [S*H*W, T] rows, one per pixel."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    S, T, H, W = x.shape
    return x.transpose(0, 2, 3, 1).reshape(-1, T)


def rows_to_frames(rows, S, H, W) -> np.ndarray:
    return rows.reshape(S, H, W, -1).transpose(0, 3, 1, 2)


# --------------------------------------------------------- linear regression

@dataclass
class LRModel:
    coef: np.ndarray       # [n_out, n_in]
    intercept: np.ndarray  # [n_out]
    lam: float = 0.0

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {"lr.coef": self.coef, "lr.intercept": self.intercept}

    @classmethod
    def from_arrays(cls, arrays, lam=0.0) -> "LRModel":
        return cls(arrays["lr.coef"].copy(), arrays["lr.intercept"].copy(), lam)


def lr_fit(x, y, lam: float = 1e-6, chunk: int = 64) -> LRModel:
    """Ridge regression on pooled pixel rows; the intercept is not penalized.

    ``x`` is [S, n_in, H, W] and ``y`` is [S, n_out, H, W], both in model space.
    """
    if lam < 0:
        raise ConfigError("ridge regularizer must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
        raise DimensionError(f"inputs {x.shape} and targets {y.shape} disagree")
    n_in, n_out = x.shape[1], y.shape[1]
    A = np.zeros((n_in + 1, n_in + 1))
    B = np.zeros((n_in + 1, n_out))
    n_rows = 0
    for s in range(0, len(x), chunk):
        X = pixel_rows(x[s:s + chunk])
        Y = pixel_rows(y[s:s + chunk])
        X1 = np.hstack([X, np.ones((len(X), 1))])
        A += X1.T @ X1
        B += X1.T @ Y
        n_rows += len(X)
    if n_rows < 10:
        raise ConfigError(f"need at least 10 pixel rows, got {n_rows}")
    reg = np.full(n_in + 1, lam)
    reg[-1] = 0.0
    A_reg = A + np.diag(reg)
    if np.linalg.matrix_rank(A_reg) < n_in + 1:
        raise NumericError("normal equations are singular; use a ridge regularizer lam > 0")
    sol = np.linalg.solve(A_reg, B)
    return LRModel(sol[:-1].T.copy(), sol[-1].copy(), lam)


def lr_predict(m: LRModel, x) -> np.ndarray:
    """Affine map per pixel; [.., n_in, H, W] -> [.., n_out, H, W] in model space."""
    x = np.asarray(x, dtype=np.float64)
    out = np.einsum("...thw,kt->...khw", x, m.coef)
    return out + m.intercept[:, None, None]


# -------------------------------------------------------------- random forest

@dataclass
class Tree:
    feature: np.ndarray    # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray      # [n_nodes, n_out]
    count: np.ndarray

    def predict(self, X) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.nonzero(active)[0]
            nd = node[idx]
            go_left = X[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active[idx] = self.feature[node[idx]] >= 0
        return self.value[node]

    def n_nodes(self) -> int:
        return len(self.feature)


@dataclass
class RFModel:
    trees: List[Tree]
    max_depth: int = 8
    min_samples_leaf: int = 5
    max_features: int = 3
    seed: int = 0
    target_range: Tuple[float, float] = (0.0, 0.0)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def to_arrays(self) -> Dict[str, np.ndarray]:
        out = {"rf.target_range": np.asarray(self.target_range, dtype=np.float64)}
        for i, t in enumerate(self.trees):
            for name in ("feature", "threshold", "left", "right", "value", "count"):
                out[f"rf.tree{i}.{name}"] = getattr(t, name).astype(np.float64)
        return out

    @classmethod
    def from_arrays(cls, arrays, **kw) -> "RFModel":
        trees = []
        i = 0
        while f"rf.tree{i}.feature" in arrays:
            g = lambda n: arrays[f"rf.tree{i}.{n}"]
            trees.append(Tree(g("feature").astype(np.int64), g("threshold").copy(),
                              g("left").astype(np.int64), g("right").astype(np.int64),
                              g("value").copy(), g("count").astype(np.int64)))
            i += 1
        tr = tuple(arrays["rf.target_range"]) if "rf.target_range" in arrays else (0.0, 0.0)
        return cls(trees, target_range=tr, **kw)


def _best_split(X, Y, features, min_leaf):
    """Best (feature, threshold, gain) by summed-output SSE reduction, or None."""
    n = len(X)
    total = Y.sum(axis=0)
    sse_parent = float(np.sum(Y * Y) - np.sum(total * total) / n)
    best = None
    lo, hi = min_leaf, n - min_leaf  # left sizes allowed: lo..hi
    if hi < lo:
        return None
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        ys = Y[order]
        csum = np.cumsum(ys, axis=0)
        csq = np.cumsum(np.sum(ys * ys, axis=1))
        sizes = np.arange(lo, hi + 1)
        # only cut between distinct feature values
        sizes = sizes[xs[sizes - 1] < xs[sizes]]
        if sizes.size == 0:
            continue
        ls = csum[sizes - 1]
        rs = total - ls
        sse = (csq[-1] - np.sum(ls * ls, axis=1) / sizes
               - np.sum(rs * rs, axis=1) / (n - sizes))
        k = int(np.argmin(sse))
        gain = sse_parent - float(sse[k])
        if best is None or gain > best[2]:
            m = sizes[k]
            a, b = xs[m - 1], xs[m]
            thr = a + (b - a) / 2
            if not a <= thr < b:
                thr = a
            best = (int(f), float(thr), gain)
    if best is None or best[2] <= 0:
        return None
    return best


def _grow_tree(X, Y, max_depth, min_leaf, max_features, rng) -> Tree:
    feature, threshold, left, right, value, count = [], [], [], [], [], []

    def new_node(Yn):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(Yn.mean(axis=0))
        count.append(len(Yn))
        return len(feature) - 1

    root = new_node(Y)
    stack = [(root, np.arange(len(X)), 0)]
    n_feat = X.shape[1]
    while stack:
        node, idx, depth = stack.pop()
        if depth >= max_depth or len(idx) < 2 * min_leaf:
            continue
        feats = rng.choice(n_feat, size=min(max_features, n_feat), replace=False)
        split = _best_split(X[idx], Y[idx], np.sort(feats), min_leaf)
        if split is None:
            continue
        f, thr, _ = split
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node], threshold[node] = f, thr
        left[node] = new_node(Y[li])
        right[node] = new_node(Y[ri])
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return Tree(np.array(feature, dtype=np.int64), np.array(threshold),
                np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                np.array(value).reshape(len(feature), Y.shape[1]),
                np.array(count, dtype=np.int64))


def rf_fit_rows(X, Y, n_trees=20, max_depth=8, min_samples_leaf=5, seed=0,
                max_features: Optional[int] = None) -> RFModel:
    """Bagged regression trees on (n_rows, n_in) -> (n_rows, n_out) rows."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if min_samples_leaf < 1:
        raise ConfigError("min_samples_leaf must be >= 1")
    if len(X) < min_samples_leaf:
        raise ConfigError(f"need at least min_samples_leaf={min_samples_leaf} rows")
    if max_features is None:
        max_features = int(np.ceil(np.sqrt(X.shape[1])))
    trees = []
    for child in np.random.SeedSequence(seed).spawn(n_trees):
        rng = np.random.default_rng(child)
        boot = rng.integers(0, len(X), len(X))
        trees.append(_grow_tree(X[boot], Y[boot], max_depth, min_samples_leaf,
                                max_features, rng))
    return RFModel(trees, max_depth, min_samples_leaf, max_features, seed,
                   (float(Y.min()), float(Y.max())))


def rf_fit(x, y, n_trees=20, max_depth=8, min_samples_leaf=5, seed=0,
           max_rows: Optional[int] = None, max_features: Optional[int] = None) -> RFModel:
    """Fit on pooled pixel rows of model-space arrays [S, n_in, H, W] / [S, n_out, H, W].

    ``max_rows`` draws a seeded subset of pixel rows to bound fitting time.
    """
    X, Y = pixel_rows(x), pixel_rows(y)
    if max_rows is not None and len(X) > max_rows:
        pick = np.sort(np.random.default_rng([seed, 1]).choice(len(X), max_rows,
                                                              replace=False))
        X, Y = X[pick], Y[pick]
    return rf_fit_rows(X, Y, n_trees, max_depth, min_samples_leaf, seed, max_features)


def rf_predict_rows(m: RFModel, X) -> np.ndarray:
    acc = np.zeros((len(X), m.trees[0].value.shape[1]))
    for t in m.trees:
        acc += t.predict(X)
    return acc / len(m.trees)


def rf_predict(m: RFModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    S, _, H, W = x.shape
    out = rows_to_frames(rf_predict_rows(m, pixel_rows(x)), S, H, W)
    return out[0] if squeeze else out


# --------------------------------------------------------------- forecasters

class Persistence:
    """Forecaster that repeats the last observed frame."""
    kind = "BM"

    def __init__(self, n_in=9, n_out=3):
        self.n_in, self.n_out = n_in, n_out

    def forecast(self, x):
        return bm_forecast(x, self.n_out)


class LinearForecaster:
    kind = "LR"

    def __init__(self, model: LRModel):
        self.model = model
        self.n_out, self.n_in = model.coef.shape

    def forecast(self, x):
        return inverse_transform(lr_predict(self.model, transform(x)))


class ForestForecaster:
    kind = "RF"

    def __init__(self, model: RFModel, n_in=9):
        self.model = model
        self.n_in = n_in
        self.n_out = model.trees[0].value.shape[1]

    def forecast(self, x):
        return inverse_transform(rf_predict(self.model, transform(x)))
