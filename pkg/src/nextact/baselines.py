"""CART decision tree and bagged random forest over flat prefix vectors.

Splits send ``x[feature] <= threshold`` left. Candidate thresholds are the
midpoints between consecutive distinct feature values, scored by Gini gain;
ties go to the lowest feature index, then the lowest threshold. A node keeps
splitting while it is impure and some feature still varies, even when the
best available gain is zero (XOR-like data needs that).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .features import ManifestMismatchError

MODEL_FORMAT = "nextact-trees"
MODEL_VERSION = 1

_TIE_TOL = 1e-12


class EmptyNodeError(ValueError):
    pass


class InconsistentVectorsError(ValueError):
    pass


class LayoutMismatchError(ValueError):
    pass


@dataclass
class Leaf:
    class_index: int
    distribution: np.ndarray


@dataclass
class Split:
    feature: int
    threshold: float
    left: "TreeNode"
    right: "TreeNode"


TreeNode = Union[Leaf, Split]


def gini(counts) -> float:
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    if total <= 0:
        raise EmptyNodeError("gini of an empty node")
    p = counts / total
    return float(1.0 - np.sum(p * p))


@dataclass
class TreeConfig:
    max_depth: int | None = None
    min_samples_split: int = 2
    feature_fraction: float = 1.0


@dataclass
class ForestConfig:
    n_trees: int = 100
    max_depth: int | None = None
    min_samples_split: int = 2
    # None means sqrt(F)/F, resolved at fit time
    feature_fraction: float | None = None
    bootstrap: bool = True
    seed: int = 0


@dataclass
class ForestModel:
    trees: list[TreeNode]
    config: ForestConfig
    n_classes: int
    n_features: int
    class_names: list = field(default_factory=list)


def _leaf(y, n_classes) -> Leaf:
    counts = np.bincount(y, minlength=n_classes)
    return Leaf(int(np.argmax(counts)), counts)


def _best_split(X, y, idx, features, n_classes):
    """Best (feature, threshold) for the rows ``idx``; None when nothing varies."""
    n = idx.size
    best = None
    best_score = -np.inf
    for f in features:
        xs = X[idx, f]
        order = np.argsort(xs, kind="stable")
        xs = xs[order]
        valid = np.flatnonzero(xs[:-1] < xs[1:])
        if valid.size == 0:
            continue
        onehot = np.zeros((n, n_classes))
        onehot[np.arange(n), y[idx][order]] = 1.0
        left = np.cumsum(onehot, axis=0)[valid]
        right = onehot.sum(axis=0) - left
        n_left = (valid + 1).astype(float)
        n_right = n - n_left
        # maximising this is minimising the size-weighted child Gini
        score = (left ** 2).sum(axis=1) / n_left + (right ** 2).sum(axis=1) / n_right
        top = score.max()
        j = int(np.flatnonzero(score >= top - _TIE_TOL)[0])
        if top > best_score + _TIE_TOL:
            lo, hi = xs[valid[j]], xs[valid[j] + 1]
            thr = (lo + hi) / 2.0
            if not lo <= thr < hi:
                thr = lo
            best_score, best = top, (int(f), float(thr))
    return best


def _n_split_features(fraction: float, n_features: int) -> int:
    return max(1, min(n_features, math.ceil(fraction * n_features)))


def _build(X, y, idx, depth, config: TreeConfig, n_classes, rng) -> TreeNode:
    node = _leaf(y[idx], n_classes)
    if (np.count_nonzero(node.distribution) <= 1
            or (config.max_depth is not None and depth >= config.max_depth)
            or idx.size < config.min_samples_split):
        return node
    n_features = X.shape[1]
    k = _n_split_features(config.feature_fraction, n_features)
    if k == n_features:
        features = range(n_features)
    else:
        features = np.sort(rng.choice(n_features, size=k, replace=False))
    found = _best_split(X, y, idx, features, n_classes)
    if found is None:
        return node
    f, thr = found
    go_left = X[idx, f] <= thr
    return Split(f, thr,
                 _build(X, y, idx[go_left], depth + 1, config, n_classes, rng),
                 _build(X, y, idx[~go_left], depth + 1, config, n_classes, rng))


def _check_xy(X, y):
    try:
        X = np.asarray(X, dtype=float)
    except ValueError as exc:
        raise InconsistentVectorsError(str(exc)) from None
    if X.ndim != 2:
        raise InconsistentVectorsError("samples must form a 2-D array of equal-length vectors")
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0:
        raise EmptyNodeError("no samples")
    if y.shape != (X.shape[0],) or y.min() < 0:
        raise InconsistentVectorsError("labels must be non-negative, one per vector")
    return X, y


def fit_tree(X, y, config: TreeConfig | None = None, seed: int = 0,
             n_classes: int | None = None) -> TreeNode:
    """Grow a CART tree; ``y`` holds class indices ``0..C-1``."""
    X, y = _check_xy(X, y)
    config = config or TreeConfig()
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    rng = np.random.default_rng(seed)
    return _build(X, y, np.arange(X.shape[0]), 0, config, n_classes, rng)


def predict_tree(node: TreeNode, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    out = np.empty(X.shape[0], dtype=np.int64)
    stack = [(node, np.arange(X.shape[0]))]
    while stack:
        node, idx = stack.pop()
        if isinstance(node, Leaf):
            out[idx] = node.class_index
            continue
        go_left = X[idx, node.feature] <= node.threshold
        stack.append((node.left, idx[go_left]))
        stack.append((node.right, idx[~go_left]))
    return out


def tree_depth(node: TreeNode) -> int:
    if isinstance(node, Leaf):
        return 0
    return 1 + max(tree_depth(node.left), tree_depth(node.right))


def decision_path(node: TreeNode, x, feature_names=None, class_names=None) -> list[str]:
    """Human-readable tests applied to ``x`` from the root to its leaf."""
    lines = []
    while isinstance(node, Split):
        name = feature_names[node.feature] if feature_names else f"x[{node.feature}]"
        value = x[node.feature]
        if value <= node.threshold:
            lines.append(f"{name} = {value:g} <= {node.threshold:g}")
            node = node.left
        else:
            lines.append(f"{name} = {value:g} > {node.threshold:g}")
            node = node.right
    label = class_names[node.class_index] if class_names else node.class_index
    lines.append(f"predict {label} (leaf counts {node.distribution.tolist()})")
    return lines


def fit_forest(X, y, config: ForestConfig | None = None,
               n_classes: int | None = None) -> ForestModel:
    """Bagged trees, each with its own bootstrap and per-split feature draws."""
    X, y = _check_xy(X, y)
    config = config or ForestConfig()
    if config.n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    n, n_features = X.shape
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    fraction = config.feature_fraction
    if fraction is None:
        fraction = math.sqrt(n_features) / n_features
    tree_cfg = TreeConfig(config.max_depth, config.min_samples_split, fraction)
    trees = []
    for child in np.random.SeedSequence(config.seed).spawn(config.n_trees):
        rng = np.random.default_rng(child)
        idx = rng.integers(n, size=n) if config.bootstrap else np.arange(n)
        trees.append(_build(X, y, idx, 0, tree_cfg, n_classes, rng))
    return ForestModel(trees, config, n_classes, n_features)


def forest_votes(model: ForestModel, X) -> np.ndarray:
    """Vote counts, shape ``(n_samples, n_classes)``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.n_features:
        raise LayoutMismatchError(
            f"vectors have {X.shape[1]} features; model was fit on {model.n_features}")
    votes = np.zeros((X.shape[0], model.n_classes), dtype=np.int64)
    rows = np.arange(X.shape[0])
    for tree in model.trees:
        np.add.at(votes, (rows, predict_tree(tree, X)), 1)
    return votes


def predict_forest(model: ForestModel, vector) -> tuple[int, np.ndarray]:
    """Majority class (ties to the lowest index) and the vote distribution."""
    votes = forest_votes(model, np.asarray(vector, dtype=float)[None, :])[0]
    return int(np.argmax(votes)), votes


# -- serialisation ----------------------------------------------------------


def node_to_dict(node: TreeNode) -> dict:
    if isinstance(node, Leaf):
        return {"class": node.class_index, "counts": node.distribution.tolist()}
    return {"feature": node.feature, "threshold": node.threshold,
            "left": node_to_dict(node.left), "right": node_to_dict(node.right)}


def node_from_dict(d: dict) -> TreeNode:
    if "class" in d:
        return Leaf(int(d["class"]), np.asarray(d["counts"], dtype=np.int64))
    return Split(int(d["feature"]), float(d["threshold"]),
                 node_from_dict(d["left"]), node_from_dict(d["right"]))


# -- estimators -------------------------------------------------------------


class _TreeEstimatorBase(ClassifierMixin, BaseEstimator):
    kind = ""

    def _prepare(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        return X, y_idx

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]

    def _trees(self) -> list[TreeNode]:
        raise NotImplementedError

    def explain(self, x, feature_names=None, tree: int = 0, label_names=None) -> list[str]:
        """Decision path of ``x`` through one tree.

        ``label_names`` maps the fitted ``classes_`` values to display names.
        """
        check_is_fitted(self, "classes_")
        classes = list(self.classes_)
        if label_names is not None:
            classes = [label_names[c] for c in classes]
        return decision_path(self._trees()[tree], np.asarray(x, dtype=float),
                             feature_names, classes)

    def save(self, path, manifest_hash: str | None = None) -> None:
        check_is_fitted(self, "classes_")
        params = self.get_params()
        payload = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "kind": self.kind,
            "manifest_hash": manifest_hash,
            "params": params,
            "classes": self.classes_.tolist(),
            "n_features": self.n_features_in_,
            "trees": [node_to_dict(t) for t in self._trees()],
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1))


def load_tree_model(path, manifest_hash: str | None = None):
    """Load a tree or forest saved with ``save``."""
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path} is not a tree/forest model file")
    if payload["version"] != MODEL_VERSION:
        raise ValueError(f"unsupported model version {payload['version']}")
    if manifest_hash is not None and payload["manifest_hash"] != manifest_hash:
        raise ManifestMismatchError("model was trained against another manifest")
    cls = {"tree": TreeClassifier, "forest": ForestClassifier}[payload["kind"]]
    est = cls(**payload["params"])
    est.classes_ = np.asarray(payload["classes"])
    est.n_features_in_ = payload["n_features"]
    trees = [node_from_dict(t) for t in payload["trees"]]
    if payload["kind"] == "tree":
        est.tree_ = trees[0]
    else:
        cfg = ForestConfig(est.n_trees, est.max_depth, est.min_samples_split,
                           est.feature_fraction, est.bootstrap, est.random_state)
        est.forest_ = ForestModel(trees, cfg, len(est.classes_), est.n_features_in_)
    return est


class TreeClassifier(_TreeEstimatorBase):
    """Single CART tree with Gini splits."""

    kind = "tree"

    def __init__(self, max_depth=None, min_samples_split=2, feature_fraction=1.0,
                 random_state=0):
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split
        self.feature_fraction = feature_fraction
        self.random_state = random_state

    def fit(self, X, y):
        X, y_idx = self._prepare(X, y)
        cfg = TreeConfig(self.max_depth, self.min_samples_split, self.feature_fraction)
        self.tree_ = fit_tree(X, y_idx, cfg, self.random_state, len(self.classes_))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "tree_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise LayoutMismatchError("feature count differs from training")
        proba = np.zeros((X.shape[0], len(self.classes_)))
        proba[np.arange(X.shape[0]), predict_tree(self.tree_, X)] = 1.0
        return proba

    def _trees(self):
        return [self.tree_]


class ForestClassifier(_TreeEstimatorBase):
    """Bagged CART trees; ``predict_proba`` is the vote share per class.

    ``feature_fraction=None`` draws ``ceil(sqrt(F))`` features per split.
    """

    kind = "forest"

    def __init__(self, n_trees=100, max_depth=None, min_samples_split=2,
                 feature_fraction=None, bootstrap=True, random_state=0):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split
        self.feature_fraction = feature_fraction
        self.bootstrap = bootstrap
        self.random_state = random_state

    def fit(self, X, y):
        X, y_idx = self._prepare(X, y)
        cfg = ForestConfig(self.n_trees, self.max_depth, self.min_samples_split,
                           self.feature_fraction, self.bootstrap, self.random_state)
        self.forest_ = fit_forest(X, y_idx, cfg, len(self.classes_))
        self.forest_.class_names = self.classes_.tolist()
        return self

    def votes(self, X):
        check_is_fitted(self, "forest_")
        return forest_votes(self.forest_, check_array(X))

    def predict_proba(self, X):
        v = self.votes(X)
        return v / v.sum(axis=1, keepdims=True)

    def _trees(self):
        return self.forest_.trees
