"""Random forest for the positive/negative nucleus decision.

Bagged gini trees with per-node random feature subsets (mtry).  Each tree
votes its leaf's majority class; the model confidence for a sample is the
fraction of trees voting positive.  Out-of-bag accuracy is computed during
training and stored on the model.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .gbdt import FORMAT_VERSION, ModelFormatError, Tree, _load_json, _tree_from_dict, _tree_to_dict

CLASS_NAMES = ("negative", "positive")


@dataclass(frozen=True)
class RfParams:
    n_trees: int = 200
    max_depth: int = 12
    min_leaf: int = 2
    mtry: int | None = None  # None resolves to ceil(sqrt(n_features))
    bootstrap: bool = True
    seed: int = 42

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be >= 1")


@dataclass(frozen=True)
class RfModel:
    trees: tuple[Tree, ...]
    n_features: int
    class_names: tuple[str, str]
    oob_accuracy: float | None
    params: RfParams


class _GiniBuilder:
    """Depth-first gini tree; leaf values store the positive-class fraction."""

    def __init__(self, x, y, max_depth, min_leaf, mtry, rng):
        self.x = x
        self.y = y
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.mtry = mtry
        self.rng = rng
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []

    def build(self, rows: np.ndarray, depth: int) -> int:
        node = len(self.feature)
        n1 = float(self.y[rows].sum())
        n = len(rows)
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(n1 / n)
        if depth >= self.max_depth or n < 2 * self.min_leaf or n1 in (0.0, float(n)):
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

    def _best_split(self, rows: np.ndarray) -> tuple[int, float] | None:
        n = len(rows)
        n1_total = float(self.y[rows].sum())
        n_features = self.x.shape[1]
        subset = np.sort(self.rng.choice(n_features, size=min(self.mtry, n_features), replace=False))
        best_impurity = self._gini(n1_total, n) - 1e-12
        best: tuple[int, float] | None = None
        for feat in subset:
            col = self.x[rows, feat]
            order = np.argsort(col, kind="stable")
            sorted_vals = col[order]
            ones_cum = np.cumsum(self.y[rows][order])
            change = np.nonzero(sorted_vals[1:] > sorted_vals[:-1])[0]
            for pos in change:
                n_left = pos + 1
                if n_left < self.min_leaf or n - n_left < self.min_leaf:
                    continue
                n1_left = float(ones_cum[pos])
                impurity = (
                    n_left / n * self._gini(n1_left, n_left)
                    + (n - n_left) / n * self._gini(n1_total - n1_left, n - n_left)
                )
                if impurity < best_impurity:
                    best_impurity = impurity
                    thr = (sorted_vals[pos] + sorted_vals[pos + 1]) / 2.0
                    best = (int(feat), float(thr))
        return best

    @staticmethod
    def _gini(n1: float, n: int) -> float:
        p = n1 / n
        return 1.0 - p * p - (1.0 - p) * (1.0 - p)

    def as_tree(self) -> Tree:
        return Tree(
            feature=tuple(self.feature),
            threshold=tuple(self.threshold),
            left=tuple(self.left),
            right=tuple(self.right),
            value=tuple(self.value),
        )


def rf_train(x: np.ndarray, y: np.ndarray, params: RfParams = RfParams()) -> RfModel:
    """Fit the forest; label 1 = positive (immunopositive)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("x must be (n, f) with matching labels")
    if not np.isfinite(x).all():
        raise ValueError("features contain NaN or infinity")
    if not np.array_equal(np.unique(y), [0.0, 1.0]):
        raise ValueError("training data must contain both classes (labels 0 and 1)")

    n, n_features = x.shape
    mtry = params.mtry if params.mtry is not None else math.ceil(math.sqrt(n_features))
    rng = np.random.Generator(np.random.PCG64(params.seed))

    trees: list[Tree] = []
    oob_votes = np.zeros((n, 2), dtype=np.int64)
    for _ in range(params.n_trees):
        if params.bootstrap:
            bag = np.sort(rng.integers(0, n, size=n))
        else:
            bag = np.arange(n)
        builder = _GiniBuilder(x[bag], y[bag], params.max_depth, params.min_leaf, mtry, rng)
        builder.build(np.arange(len(bag)), 0)
        tree = builder.as_tree()
        trees.append(tree)
        if params.bootstrap:
            oob = np.setdiff1d(np.arange(n), bag)
            if len(oob):
                votes = (tree.predict(x[oob]) > 0.5).astype(np.int64)
                oob_votes[oob, 0] += 1 - votes
                oob_votes[oob, 1] += votes

    oob_accuracy = None
    voted = oob_votes.sum(axis=1) > 0
    if params.bootstrap and voted.any():
        pred = (oob_votes[voted, 1] > oob_votes[voted, 0]).astype(np.float64)
        oob_accuracy = float((pred == y[voted]).mean())
    return RfModel(
        trees=tuple(trees),
        n_features=n_features,
        class_names=CLASS_NAMES,
        oob_accuracy=oob_accuracy,
        params=params,
    )


def rf_predict_proba(model: RfModel, x: np.ndarray) -> np.ndarray:
    """Fraction of trees voting positive, one value per row."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.n_features:
        raise ValueError(f"expected (n, {model.n_features}) features, got {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("features contain NaN or infinity")
    votes = np.zeros(len(x), dtype=np.int64)
    for tree in model.trees:
        votes += tree.predict(x) > 0.5
    return votes / len(model.trees)


def rf_save(model: RfModel, path: str | os.PathLike) -> None:
    doc = {
        "kind": "rf",
        "version": FORMAT_VERSION,
        "n_features": model.n_features,
        "class_names": list(model.class_names),
        "oob_accuracy": model.oob_accuracy,
        "params": {
            "n_trees": model.params.n_trees,
            "max_depth": model.params.max_depth,
            "min_leaf": model.params.min_leaf,
            "mtry": model.params.mtry,
            "bootstrap": model.params.bootstrap,
            "seed": model.params.seed,
        },
        "trees": [_tree_to_dict(t) for t in model.trees],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def rf_load(path: str | os.PathLike) -> RfModel:
    doc = _load_json(path, "rf")
    try:
        params = RfParams(**doc["params"])
        model = RfModel(
            trees=tuple(_tree_from_dict(t) for t in doc["trees"]),
            n_features=int(doc["n_features"]),
            class_names=tuple(doc["class_names"]),  # type: ignore[arg-type]
            oob_accuracy=doc.get("oob_accuracy"),
            params=params,
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"{path}: malformed rf model ({exc})") from exc
    for tree in model.trees:
        if any(f >= model.n_features for f in tree.feature):
            raise ModelFormatError(f"{path}: split feature index out of range")
    return model
