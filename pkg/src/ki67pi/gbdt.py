"""Gradient-boosted decision trees with logistic loss, built from scratch.

Binary classifier for overlapped-region detection.  Stage-wise additive
model: regression trees fit to the negative gradient of the binomial
deviance, leaf values set by a Newton step (sum of gradients over sum of
hessians).  Split search is exact greedy over sorted unique feature
values; ties resolve to the lowest feature index, then lowest threshold,
so training is fully deterministic for a given seed.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

FORMAT_VERSION = 1
_EPS_HESSIAN = 1e-6
_MAX_LEAF_VALUE = 10.0


class ModelFormatError(ValueError):
    """Malformed model file, wrong kind, or unsupported version."""


@dataclass(frozen=True)
class GbdtParams:
    n_trees: int = 200
    max_depth: int = 3
    learning_rate: float = 0.1
    min_leaf: int = 5
    subsample: float = 1.0
    seed: int = 42

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if not 0.0 < self.subsample <= 1.0:
            raise ValueError("subsample must lie in (0, 1]")


@dataclass(frozen=True)
class Tree:
    """Flat array tree: feature[i] < 0 marks node i as a leaf."""

    feature: tuple[int, ...]
    threshold: tuple[float, ...]
    left: tuple[int, ...]
    right: tuple[int, ...]
    value: tuple[float, ...]

    def predict(self, x: np.ndarray) -> np.ndarray:
        feature = np.asarray(self.feature)
        threshold = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        value = np.asarray(self.value)
        node = np.zeros(len(x), dtype=np.intp)
        while True:
            feat = feature[node]
            active = feat >= 0
            if not active.any():
                return value[node]
            rows = np.nonzero(active)[0]
            goes_left = x[rows, feat[rows]] < threshold[node[rows]]
            node[rows] = np.where(goes_left, left[node[rows]], right[node[rows]])


@dataclass(frozen=True)
class GbdtModel:
    base_score: float
    trees: tuple[Tree, ...]
    feature_names: tuple[str, ...]
    params: GbdtParams = field(default=GbdtParams())

    @property
    def n_features(self) -> int:
        return len(self.feature_names)


def _sigmoid(z: np.ndarray | float) -> np.ndarray | float:
    return 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=np.float64)))


class _TreeBuilder:
    """Grows one regression tree on (gradient, hessian) pairs."""

    def __init__(self, x: np.ndarray, g: np.ndarray, h: np.ndarray, max_depth: int, min_leaf: int):
        self.x = x
        self.g = g
        self.h = h
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []

    def build(self, rows: np.ndarray, depth: int) -> int:
        node = len(self.feature)
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(self._leaf_value(rows))
        if depth >= self.max_depth or len(rows) < 2 * self.min_leaf:
            return node
        split = self._best_split(rows)
        if split is None:
            return node
        feat, thr = split
        goes_left = self.x[rows, feat] < thr
        self.feature[node] = feat
        self.threshold[node] = thr
        self.left[node] = self.build(rows[goes_left], depth + 1)
        self.right[node] = self.build(rows[~goes_left], depth + 1)
        return node

    def _leaf_value(self, rows: np.ndarray) -> float:
        g = float(self.g[rows].sum())
        h = float(self.h[rows].sum())
        v = g / (h + _EPS_HESSIAN)
        return float(np.clip(v, -_MAX_LEAF_VALUE, _MAX_LEAF_VALUE))

    def _best_split(self, rows: np.ndarray) -> tuple[int, float] | None:
        g_total = float(self.g[rows].sum())
        h_total = float(self.h[rows].sum())
        parent = g_total * g_total / (h_total + _EPS_HESSIAN)
        best_gain = 1e-12
        best: tuple[int, float] | None = None
        n = len(rows)
        for feat in range(self.x.shape[1]):
            col = self.x[rows, feat]
            order = np.argsort(col, kind="stable")
            sorted_vals = col[order]
            g_cum = np.cumsum(self.g[rows][order])
            h_cum = np.cumsum(self.h[rows][order])
            # candidate boundaries: positions where the value changes
            change = np.nonzero(sorted_vals[1:] > sorted_vals[:-1])[0]
            for pos in change:
                n_left = pos + 1
                if n_left < self.min_leaf or n - n_left < self.min_leaf:
                    continue
                gl, hl = g_cum[pos], h_cum[pos]
                gr, hr = g_total - gl, h_total - hl
                gain = (
                    gl * gl / (hl + _EPS_HESSIAN)
                    + gr * gr / (hr + _EPS_HESSIAN)
                    - parent
                )
                if gain > best_gain:
                    best_gain = gain
                    thr = (sorted_vals[pos] + sorted_vals[pos + 1]) / 2.0
                    best = (feat, float(thr))
        return best

    def as_tree(self) -> Tree:
        return Tree(
            feature=tuple(self.feature),
            threshold=tuple(self.threshold),
            left=tuple(self.left),
            right=tuple(self.right),
            value=tuple(self.value),
        )


def gbdt_train(
    x: np.ndarray,
    y: np.ndarray,
    params: GbdtParams = GbdtParams(),
    feature_names: tuple[str, ...] | None = None,
) -> GbdtModel:
    """Fit the boosted ensemble; label 1 = overlapped, 0 = single."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("x must be (n, f) with matching labels")
    if len(x) < 2:
        raise ValueError("need at least two samples")
    if not np.isfinite(x).all():
        raise ValueError("features contain NaN or infinity")
    classes = np.unique(y)
    if not np.array_equal(classes, [0.0, 1.0]):
        raise ValueError("training data must contain both classes (labels 0 and 1)")
    if feature_names is None:
        feature_names = tuple(f"f{i}" for i in range(x.shape[1]))
    if len(feature_names) != x.shape[1]:
        raise ValueError("feature_names length must match feature count")

    rng = np.random.Generator(np.random.PCG64(params.seed))
    p_mean = float(np.clip(y.mean(), 1e-12, 1.0 - 1e-12))
    base = math.log(p_mean / (1.0 - p_mean))
    raw = np.full(len(y), base, dtype=np.float64)
    n = len(y)
    n_sub = max(1, int(round(params.subsample * n)))

    trees: list[Tree] = []
    for _ in range(params.n_trees):
        if n_sub < n:
            rows = np.sort(rng.permutation(n)[:n_sub])
        else:
            rows = np.arange(n)
        p = _sigmoid(raw[rows])
        grad = y[rows] - p
        hess = p * (1.0 - p)
        builder = _TreeBuilder(x[rows], grad, hess, params.max_depth, params.min_leaf)
        builder.build(np.arange(len(rows)), 0)
        tree = builder.as_tree()
        trees.append(tree)
        raw += params.learning_rate * tree.predict(x)
    return GbdtModel(base_score=base, trees=tuple(trees), feature_names=feature_names, params=params)


def gbdt_raw_score(model: GbdtModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.n_features:
        raise ValueError(f"expected (n, {model.n_features}) features, got {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("features contain NaN or infinity")
    raw = np.full(len(x), model.base_score, dtype=np.float64)
    for tree in model.trees:
        raw += model.params.learning_rate * tree.predict(x)
    return raw


def gbdt_predict_batch(model: GbdtModel, x: np.ndarray) -> np.ndarray:
    """Probability of the overlapped class for each row."""
    return np.asarray(_sigmoid(gbdt_raw_score(model, x)))


def gbdt_predict(model: GbdtModel, features) -> float:
    """Probability that a single region is overlapped."""
    arr = features.as_array() if hasattr(features, "as_array") else np.asarray(features, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError("gbdt_predict takes a single feature vector")
    return float(gbdt_predict_batch(model, arr[None, :])[0])


def log_loss(model: GbdtModel, x: np.ndarray, y: np.ndarray) -> float:
    """Mean binomial deviance of the full ensemble on (x, y)."""
    p = np.clip(gbdt_predict_batch(model, x), 1e-15, 1.0 - 1e-15)
    y = np.asarray(y, dtype=np.float64)
    return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean())


def staged_log_loss(model: GbdtModel, x: np.ndarray, y: np.ndarray) -> list[float]:
    """Training-style loss after each boosting stage (stage 0 = base score)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    raw = np.full(len(x), model.base_score, dtype=np.float64)
    losses = []

    def loss_of(raw_scores: np.ndarray) -> float:
        p = np.clip(np.asarray(_sigmoid(raw_scores)), 1e-15, 1.0 - 1e-15)
        return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean())

    losses.append(loss_of(raw))
    for tree in model.trees:
        raw += model.params.learning_rate * tree.predict(x)
        losses.append(loss_of(raw))
    return losses


def _tree_to_dict(tree: Tree) -> dict:
    return {
        "feature": list(tree.feature),
        "threshold": list(tree.threshold),
        "left": list(tree.left),
        "right": list(tree.right),
        "value": list(tree.value),
    }


def _tree_from_dict(d: dict) -> Tree:
    try:
        return Tree(
            feature=tuple(int(v) for v in d["feature"]),
            threshold=tuple(float(v) for v in d["threshold"]),
            left=tuple(int(v) for v in d["left"]),
            right=tuple(int(v) for v in d["right"]),
            value=tuple(float(v) for v in d["value"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed tree record: {exc}") from exc


def gbdt_save(model: GbdtModel, path: str | os.PathLike) -> None:
    """Serialize to versioned JSON (see docs/model-format.md)."""
    doc = {
        "kind": "gbdt",
        "version": FORMAT_VERSION,
        "base_score": model.base_score,
        "learning_rate": model.params.learning_rate,
        "feature_names": list(model.feature_names),
        "params": {
            "n_trees": model.params.n_trees,
            "max_depth": model.params.max_depth,
            "learning_rate": model.params.learning_rate,
            "min_leaf": model.params.min_leaf,
            "subsample": model.params.subsample,
            "seed": model.params.seed,
        },
        "trees": [_tree_to_dict(t) for t in model.trees],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def _load_json(path: str | os.PathLike, expected_kind: str) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError, OSError) as exc:
        raise ModelFormatError(f"{path}: not a valid model file ({exc})") from exc
    if not isinstance(doc, dict) or "kind" not in doc:
        raise ModelFormatError(f"{path}: missing model kind")
    if doc["kind"] != expected_kind:
        raise ModelFormatError(f"{path}: model kind {doc['kind']!r}, expected {expected_kind!r}")
    if doc.get("version") != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported format version {doc.get('version')!r}")
    return doc


def gbdt_load(path: str | os.PathLike) -> GbdtModel:
    doc = _load_json(path, "gbdt")
    try:
        params = GbdtParams(**doc["params"])
        model = GbdtModel(
            base_score=float(doc["base_score"]),
            trees=tuple(_tree_from_dict(t) for t in doc["trees"]),
            feature_names=tuple(str(n) for n in doc["feature_names"]),
            params=params,
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"{path}: malformed gbdt model ({exc})") from exc
    for tree in model.trees:
        if any(f >= model.n_features for f in tree.feature):
            raise ModelFormatError(f"{path}: split feature index out of range")
        if not all(math.isfinite(v) for v in tree.value):
            raise ModelFormatError(f"{path}: non-finite leaf value")
    return model
