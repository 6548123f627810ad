"""Weighted CART regression trees, gradient boosting and random forests."""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .data import DataError

MODEL_VERSION = 1
INF = math.inf


@dataclass(frozen=True)
class TreeConfig:
    max_depth: float = INF
    max_leaf_nodes: float = INF
    min_samples_leaf: int = 1

    def __post_init__(self):
        for name in ("max_depth", "max_leaf_nodes"):
            v = getattr(self, name)
            if v is None:
                object.__setattr__(self, name, INF)
            elif v < 1 or (name == "max_leaf_nodes" and v < 2 and v != INF):
                raise ValueError(f"{name} must be positive (>= 2 for max_leaf_nodes)")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")

    def to_dict(self) -> dict:
        return {k: (None if v == INF else v) for k, v in asdict(self).items()}


@dataclass
class Tree:
    """Array-encoded binary tree. ``feature[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def depth(self) -> int:
        def rec(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(rec(self.left[i]), rec(self.right[i]))

        return rec(0)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            np.asarray(d["feature"], dtype=np.int64),
            np.asarray(d["threshold"], dtype=np.float64),
            np.asarray(d["left"], dtype=np.int64),
            np.asarray(d["right"], dtype=np.int64),
            np.asarray(d["value"], dtype=np.float64),
        )


@dataclass
class _Node:
    idx: np.ndarray
    depth: int
    value: float
    split: Optional[tuple] = None  # (gain, feature, threshold, left_mask)
    children: Optional[tuple] = None


def _best_split(X, y, w, idx, min_leaf, features):
    """Lowest children SSE over ``features``; ties go to (lower feature,
    lower threshold). Returns (sse_parent - sse_children, f, thr, mask) or None."""
    Xn, yn, wn = X[idx], y[idx], w[idx]
    W = wn.sum()
    ybar = np.dot(wn, yn) / W
    r = yn - ybar
    parent_sse = float(np.dot(wn, r * r))
    n = idx.size
    if n < 2 * min_leaf or parent_sse <= 1e-13 * float(np.dot(wn, yn * yn)):
        return None
    feats = np.fromiter(features, dtype=np.int64)
    if feats.size == 0:
        return None
    # all candidate features at once: columns sorted independently
    Xf = Xn[:, feats]
    order = np.argsort(Xf, axis=0, kind="stable")
    xs = np.take_along_axis(Xf, order, axis=0)
    ws = wn[order]
    rs = r[order]
    wr = ws * rs
    cw = np.cumsum(ws, axis=0)[:-1]
    cwr = np.cumsum(wr, axis=0)[:-1]
    cwr2 = np.cumsum(wr * rs, axis=0)[:-1]
    twr = float(np.dot(wn, r))
    pos = np.arange(1, n)[:, None]  # left child gets the first `pos` samples
    valid = (xs[1:] > xs[:-1]) & (pos >= min_leaf) & (n - pos >= min_leaf)
    lw, rw = cw, W - cw
    with np.errstate(divide="ignore", invalid="ignore"):
        sse_l = cwr2 - np.where(lw > 0, cwr * cwr / lw, 0.0)
        sse_r = (parent_sse - cwr2) - np.where(rw > 0, (twr - cwr) ** 2 / rw, 0.0)
    score = np.where(valid, sse_l + sse_r, np.inf)
    col_min = score.min(axis=0)
    tol = 1e-12 * parent_sse
    best = None
    for c in np.flatnonzero(np.isfinite(col_min)):
        # near-equal scores count as ties so the tie rule survives rounding
        if best is not None and not col_min[c] < best[0] - tol:
            continue
        j = int(np.flatnonzero(score[:, c] <= col_min[c] + tol)[0])
        best = (float(score[j, c]), int(feats[c]), 0.5 * (xs[j, c] + xs[j + 1, c]))
    if best is None:
        return None
    s, f, thr = best
    mask = Xn[:, f] <= thr
    return max(parent_sse - s, 0.0), f, thr, mask


def fit_tree(
    X,
    y,
    w=None,
    cfg: TreeConfig = TreeConfig(),
    max_features: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tree:
    """Greedy weighted CART on squared error.

    Candidate thresholds are midpoints between consecutive distinct values
    and ``x <= threshold`` goes left. Growth is depth-first unless
    ``max_leaf_nodes`` is finite, in which case the split with the largest
    SSE reduction is expanded first. Samples with zero weight are ignored.
    ``max_features``/``rng`` restrict each split to a random feature subset.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError("fit_tree needs a non-empty 2-D X")
    n, p = X.shape
    w = np.ones(n) if w is None else np.asarray(w, dtype=np.float64)
    if y.shape != (n,) or w.shape != (n,):
        raise DataError("X, y and w have inconsistent lengths")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise DataError("weights must be finite and nonnegative")
    keep = np.flatnonzero(w > 0)
    if keep.size == 0:
        raise DataError("sum of weights must be positive")
    if max_features is not None and max_features < p and rng is None:
        raise ValueError("max_features needs an rng")

    def features():
        if max_features is None or max_features >= p:
            return range(p)
        return np.sort(rng.choice(p, size=max_features, replace=False))

    def leaf_value(idx):
        return float(np.dot(w[idx], y[idx]) / w[idx].sum())

    def try_split(node):
        if node.depth >= cfg.max_depth:
            return
        node.split = _best_split(X, y, w, node.idx, cfg.min_samples_leaf, features())

    root = _Node(keep, 0, leaf_value(keep))
    try_split(root)
    n_leaves = 1
    if cfg.max_leaf_nodes == INF:
        stack = [root]
        while stack:
            node = stack.pop()
            if node.split is None:
                continue
            _, f, thr, mask = node.split
            kids = (
                _Node(node.idx[mask], node.depth + 1, leaf_value(node.idx[mask])),
                _Node(node.idx[~mask], node.depth + 1, leaf_value(node.idx[~mask])),
            )
            node.children = kids
            for kid in kids:
                try_split(kid)
            stack.extend(reversed(kids))
    else:
        counter = 0
        heap = []
        if root.split is not None:
            heapq.heappush(heap, (-root.split[0], counter, root))
        while heap and n_leaves < cfg.max_leaf_nodes:
            _, _, node = heapq.heappop(heap)
            _, f, thr, mask = node.split
            kids = (
                _Node(node.idx[mask], node.depth + 1, leaf_value(node.idx[mask])),
                _Node(node.idx[~mask], node.depth + 1, leaf_value(node.idx[~mask])),
            )
            node.children = kids
            n_leaves += 1
            for kid in kids:
                try_split(kid)
                if kid.split is not None:
                    counter += 1
                    heapq.heappush(heap, (-kid.split[0], counter, kid))

    feat, thr, left, right, value = [], [], [], [], []

    def emit(node):
        i = len(feat)
        feat.append(-1)
        thr.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(node.value)
        if node.children is not None:
            feat[i] = int(node.split[1])
            thr[i] = float(node.split[2])
            left[i] = emit(node.children[0])
            right[i] = emit(node.children[1])
        return i

    emit(root)
    return Tree(
        np.array(feat, dtype=np.int64),
        np.array(thr, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(value, dtype=np.float64),
    )


def predict_tree(tree: Tree, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    node = np.zeros(X.shape[0], dtype=np.int64)
    active = tree.feature[node] >= 0
    while active.any():
        rows = np.flatnonzero(active)
        nd = node[rows]
        go_left = X[rows, tree.feature[nd]] <= tree.threshold[nd]
        node[rows] = np.where(go_left, tree.left[nd], tree.right[nd])
        active[rows] = tree.feature[node[rows]] >= 0
    return tree.value[node]


def training_sse(tree: Tree, X, y, w=None) -> float:
    w = np.ones(len(y)) if w is None else np.asarray(w)
    return float(np.dot(w, (np.asarray(y) - predict_tree(tree, X)) ** 2))


# -- ensembles -------------------------------------------------------------------


@dataclass(frozen=True)
class EnsembleConfig:
    n_estimators: int = 100
    learning_rate: float = 0.1
    mode: str = "gbr"
    bootstrap_seed: int = 0
    feature_subsample: float = 1.0 / 3.0
    bootstrap: bool = True

    def __post_init__(self):
        if self.mode not in ("gbr", "rf"):
            raise ValueError("mode must be 'gbr' or 'rf'")
        if self.n_estimators < 0 or (self.mode == "rf" and self.n_estimators < 1):
            raise ValueError("n_estimators must be >= 1 (>= 0 for gbr)")
        if self.mode == "gbr" and not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0 for gbr")
        if not 0.0 < self.feature_subsample <= 1.0:
            raise ValueError("feature_subsample must lie in (0, 1]")


@dataclass
class Ensemble:
    base_prediction: float
    trees: list = field(default_factory=list)
    learning_rate: float = 1.0
    mode: str = "gbr"
    n_features: Optional[int] = None
    feature_names: Optional[tuple] = None

    def to_dict(self) -> dict:
        return {
            "format": "spatial_ldf.ensemble",
            "version": MODEL_VERSION,
            "mode": self.mode,
            "base_prediction": self.base_prediction,
            "learning_rate": self.learning_rate,
            "n_features": self.n_features,
            "feature_names": list(self.feature_names) if self.feature_names else None,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Ensemble":
        if d.get("format") != "spatial_ldf.ensemble":
            raise DataError("not an ensemble dump")
        if d.get("version") != MODEL_VERSION:
            raise DataError(f"unsupported ensemble version {d.get('version')}")
        return cls(
            base_prediction=float(d["base_prediction"]),
            trees=[Tree.from_dict(t) for t in d["trees"]],
            learning_rate=float(d["learning_rate"]),
            mode=d["mode"],
            n_features=d.get("n_features"),
            feature_names=tuple(d["feature_names"]) if d.get("feature_names") else None,
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "Ensemble":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _weights(w, n):
    w = np.ones(n) if w is None else np.asarray(w, dtype=np.float64)
    if w.shape != (n,) or np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
        raise DataError("weights must be finite, nonnegative, one per sample, with positive sum")
    return w


def fit_gbr(X, y, w=None, cfg: EnsembleConfig = EnsembleConfig(), tree_cfg: TreeConfig = TreeConfig(max_depth=4)) -> Ensemble:
    """Least-squares boosting: each round fits a tree to the current residuals."""
    if cfg.mode != "gbr":
        raise ValueError("fit_gbr needs mode='gbr'")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = _weights(w, X.shape[0])
    base = float(np.dot(w, y) / w.sum())
    F = np.full(y.shape, base)
    ens = Ensemble(base, [], cfg.learning_rate, "gbr", X.shape[1])
    for _ in range(cfg.n_estimators):
        resid = y - F
        tree = fit_tree(X, resid, w, tree_cfg)
        ens.trees.append(tree)
        F = F + cfg.learning_rate * predict_tree(tree, X)
    return ens


def fit_rf(X, y, w=None, cfg: EnsembleConfig = EnsembleConfig(mode="rf"), tree_cfg: TreeConfig = TreeConfig()) -> Ensemble:
    """Trees on bootstrap resamples drawn with probability proportional to ``w``.

    A resampled row enters its tree with weight equal to its draw count.
    With ``bootstrap=False`` each tree sees the original weights.
    """
    if cfg.mode != "rf":
        raise ValueError("fit_rf needs mode='rf'")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    w = _weights(w, n)
    rng = np.random.default_rng(cfg.bootstrap_seed)
    max_features = max(1, int(round(cfg.feature_subsample * p)))
    prob = w / w.sum()
    trees = []
    for _ in range(cfg.n_estimators):
        if cfg.bootstrap:
            counts = np.bincount(rng.choice(n, size=n, p=prob), minlength=n).astype(np.float64)
        else:
            counts = w
        trees.append(fit_tree(X, y, counts, tree_cfg, max_features=max_features, rng=rng))
    return Ensemble(float(np.dot(w, y) / w.sum()), trees, 1.0, "rf", p)


def predict_ensemble(ens: Ensemble, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if ens.n_features is not None and X.shape[1] != ens.n_features:
        raise DataError(f"model expects {ens.n_features} features, got {X.shape[1]}")
    if ens.mode == "gbr":
        out = np.full(X.shape[0], ens.base_prediction)
        for t in ens.trees:
            out += ens.learning_rate * predict_tree(t, X)
        return out
    if not ens.trees:
        return np.full(X.shape[0], ens.base_prediction)
    return np.mean([predict_tree(t, X) for t in ens.trees], axis=0)


def fit_ensemble(X, y, w, cfg: EnsembleConfig, tree_cfg: TreeConfig) -> Ensemble:
    return fit_gbr(X, y, w, cfg, tree_cfg) if cfg.mode == "gbr" else fit_rf(X, y, w, cfg, tree_cfg)
