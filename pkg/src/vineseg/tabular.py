"""Per-pixel classifiers: CART decision tree, bagged random forest, logistic regression.

Split search conventions (fixed so that trees can be checked against an
exhaustive search):

* impurity is Gini, ``1 - sum(p_i^2)``;
* candidate thresholds are midpoints between consecutive distinct sorted
  feature values, and rows with ``x <= threshold`` go left;
* among splits whose Gini decrease is within ``TIE_TOL`` of the best one,
  the lowest feature index wins, then the lowest threshold.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .sampler import PixelTable

logger = logging.getLogger(__name__)

TIE_TOL = 1e-12
MODEL_FORMAT = "vineseg.tabular/1"


def gini_impurity(class_counts: Sequence[float]) -> float:
    counts = np.asarray(class_counts, dtype=np.float64)
    total = counts.sum()
    if (counts < 0).any() or total <= 0:
        raise ValueError("class counts must be non-negative and not all zero")
    p = counts / total
    return float(1.0 - np.sum(p * p))


# ---------------------------------------------------------------------------
# decision tree
# ---------------------------------------------------------------------------


@dataclass
class TreeNode:
    class_counts: np.ndarray
    feature: int | None = None
    threshold: float | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    @property
    def probabilities(self) -> np.ndarray:
        return self.class_counts / self.class_counts.sum()


@dataclass
class TreeParams:
    max_depth: int = 12
    min_samples_leaf: int = 1
    min_impurity_decrease: float = 0.0


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    decrease: float


def best_split(
    X: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    features: Sequence[int] | None = None,
    min_samples_leaf: int = 1,
) -> Split | None:
    """Best Gini split of ``(X, y)`` over ``features``, or None when no valid split exists."""
    n = len(y)
    if n < 2 * min_samples_leaf or n < 2:
        return None
    if features is None:
        features = range(X.shape[1])
    parent = np.bincount(y, minlength=n_classes).astype(np.float64)
    parent_gini = 1.0 - np.sum((parent / n) ** 2)
    eye = np.eye(n_classes)
    n_left = np.arange(1, n, dtype=np.float64)
    n_right = n - n_left
    leaf_ok = (n_left >= min_samples_leaf) & (n_right >= min_samples_leaf)

    per_feature = []
    best = -np.inf
    for f in sorted(features):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        left = np.cumsum(eye[y[order]], axis=0)[:-1]
        right = parent - left
        gini_l = 1.0 - np.sum((left / n_left[:, None]) ** 2, axis=1)
        gini_r = 1.0 - np.sum((right / n_right[:, None]) ** 2, axis=1)
        decrease = parent_gini - (n_left * gini_l + n_right * gini_r) / n
        valid = leaf_ok & (xs[:-1] < xs[1:])
        if not valid.any():
            continue
        decrease = np.where(valid, decrease, -np.inf)
        per_feature.append((f, xs, decrease))
        best = max(best, float(decrease.max()))
    if not per_feature:
        return None
    for f, xs, decrease in per_feature:
        hits = np.flatnonzero(decrease >= best - TIE_TOL)
        if hits.size:
            i = int(hits[0])
            threshold = (xs[i] + xs[i + 1]) / 2.0
            if threshold >= xs[i + 1]:  # adjacent doubles
                threshold = xs[i]
            return Split(int(f), float(threshold), float(decrease[i]))
    return None


@dataclass
class DecisionTree:
    root: TreeNode
    n_features: int
    n_classes: int
    _compiled: tuple | None = field(default=None, repr=False, compare=False)

    def _compile(self):
        if self._compiled is None:
            feats, thrs, lefts, rights, values = [], [], [], [], []

            def visit(node: TreeNode) -> int:
                idx = len(feats)
                feats.append(-1 if node.is_leaf else node.feature)
                thrs.append(0.0 if node.is_leaf else node.threshold)
                lefts.append(-1)
                rights.append(-1)
                values.append(node.probabilities)
                if not node.is_leaf:
                    lefts[idx] = visit(node.left)
                    rights[idx] = visit(node.right)
                return idx

            visit(self.root)
            self._compiled = (
                np.array(feats, dtype=np.int64),
                np.array(thrs, dtype=np.float64),
                np.array(lefts, dtype=np.int64),
                np.array(rights, dtype=np.int64),
                np.array(values, dtype=np.float64),
            )
        return self._compiled

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected rows of width {self.n_features}, got shape {X.shape}")
        feat, thr, left, right, values = self._compile()
        node = np.zeros(len(X), dtype=np.int64)
        active = np.flatnonzero(feat[node] >= 0)
        while active.size:
            cur = node[active]
            go_left = X[active, feat[cur]] <= thr[cur]
            node[active] = np.where(go_left, left[cur], right[cur])
            active = active[feat[node[active]] >= 0]
        return values[node]

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    @property
    def depth(self) -> int:
        def d(node):
            return 0 if node.is_leaf else 1 + max(d(node.left), d(node.right))

        return d(self.root)


def predict_tree(tree: DecisionTree | TreeNode, row: Sequence[float]) -> np.ndarray:
    """Class probabilities for one row by threshold descent (``<=`` goes left)."""
    node = tree.root if isinstance(tree, DecisionTree) else tree
    row = np.asarray(row, dtype=np.float64)
    if isinstance(tree, DecisionTree) and row.shape != (tree.n_features,):
        raise ValueError(f"row width {row.shape} does not match tree width {tree.n_features}")
    while not node.is_leaf:
        if node.feature >= len(row):
            raise ValueError("row is narrower than the tree's features")
        node = node.left if row[node.feature] <= node.threshold else node.right
    return node.probabilities


def _table_arrays(table) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(table, PixelTable):
        X, y = table.features, table.labels
    else:
        X, y = table
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("table must be (rows, features) with one label per row")
    if len(y) == 0:
        raise ValueError("cannot train on an empty table")
    if y.min() < 0:
        raise ValueError("labels must be non-negative class indices")
    return X, y


def _grow(X, y, n_classes, params: TreeParams, depth: int, feature_picker) -> TreeNode:
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    node = TreeNode(counts)
    if depth >= params.max_depth or np.count_nonzero(counts) <= 1:
        return node
    split = best_split(X, y, n_classes, feature_picker(), params.min_samples_leaf)
    if split is None or split.decrease < params.min_impurity_decrease - TIE_TOL:
        return node
    go_left = X[:, split.feature] <= split.threshold
    node.feature, node.threshold = split.feature, split.threshold
    node.left = _grow(X[go_left], y[go_left], n_classes, params, depth + 1, feature_picker)
    node.right = _grow(X[~go_left], y[~go_left], n_classes, params, depth + 1, feature_picker)
    return node


def train_decision_tree(
    table, params: TreeParams | None = None, n_classes: int | None = None, _feature_picker=None
) -> DecisionTree:
    """Greedy CART on a PixelTable or an ``(X, y)`` pair."""
    params = params or TreeParams()
    X, y = _table_arrays(table)
    n_classes = max(int(y.max()) + 1, 2) if n_classes is None else n_classes
    n_features = X.shape[1]
    picker = _feature_picker or (lambda: range(n_features))
    root = _grow(X, y, n_classes, params, 0, picker)
    return DecisionTree(root, n_features, n_classes)


# ---------------------------------------------------------------------------
# random forest
# ---------------------------------------------------------------------------


@dataclass
class ForestParams:
    n_trees: int = 100
    max_features: str | int = "sqrt"
    bootstrap: bool = True
    tree: TreeParams = field(default_factory=TreeParams)
    seed: int = 0


@dataclass
class ForestModel:
    trees: list[DecisionTree]
    params: ForestParams

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def n_classes(self) -> int:
        return self.trees[0].n_classes

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        out = self.trees[0].predict_proba(X).copy()
        for t in self.trees[1:]:
            out += t.predict_proba(X)
        return out / len(self.trees)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)


def tree_rng(seed: int, tree_index: int) -> np.random.Generator:
    """Generator for one forest member, derived by hashing ``(seed, tree_index)``."""
    return np.random.default_rng(np.random.SeedSequence([seed, tree_index]))


def resolve_max_features(rule: str | int, n_features: int) -> int:
    if rule == "sqrt":
        return max(1, math.ceil(math.sqrt(n_features)))
    if rule == "all":
        return n_features
    if isinstance(rule, int) and 1 <= rule <= n_features:
        return rule
    raise ValueError(f"invalid max_features {rule!r}")


def train_random_forest(table, params: ForestParams | None = None) -> ForestModel:
    """Bagged CART trees with per-node feature subsampling.

    Tree ``i`` draws its bootstrap sample and its per-node feature subsets from
    :func:`tree_rng` ``(seed, i)``, so a forest is reproducible and each tree
    can be rebuilt independently of the others.
    """
    params = params or ForestParams()
    if params.n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    X, y = _table_arrays(table)
    n_classes = max(int(y.max()) + 1, 2)
    n_features = X.shape[1]
    m = resolve_max_features(params.max_features, n_features)
    trees = []
    for i in range(params.n_trees):
        rng = tree_rng(params.seed, i)
        if params.bootstrap:
            idx = rng.integers(0, len(y), size=len(y))
            Xi, yi = X[idx], y[idx]
        else:
            Xi, yi = X, y
        if m == n_features:
            picker = lambda: range(n_features)  # noqa: E731
        else:
            picker = lambda rng=rng: np.sort(rng.choice(n_features, size=m, replace=False))  # noqa: E731
        trees.append(train_decision_tree((Xi, yi), params.tree, n_classes, picker))
    return ForestModel(trees, params)


def predict_forest(forest: ForestModel, row: Sequence[float]) -> np.ndarray:
    return np.mean([predict_tree(t, row) for t in forest.trees], axis=0)


# ---------------------------------------------------------------------------
# logistic regression
# ---------------------------------------------------------------------------


@dataclass
class LogRegModel:
    weights: np.ndarray
    bias: float
    history: list[float] = field(default_factory=list, repr=False)
    n_classes = 2

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        p = _sigmoid(np.asarray(X, dtype=np.float64) @ self.weights + self.bias)
        return np.stack([1.0 - p, p], axis=1)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def logistic_loss_and_grad(weights, bias, X, y) -> tuple[float, np.ndarray, float]:
    """Mean binary cross-entropy of sigmoid(X w + b) and its gradient."""
    z = X @ weights + bias
    # log(1 + e^-z) for y=1, log(1 + e^z) for y=0
    loss = float(np.mean(y * np.logaddexp(0.0, -z) + (1 - y) * np.logaddexp(0.0, z)))
    r = _sigmoid(z) - y
    return loss, X.T @ r / len(y), float(r.mean())


def train_logistic_regression(table, lr: float = 0.5, epochs: int = 500, seed: int = 0) -> LogRegModel:
    """Full-batch gradient descent from zero weights.

    ``seed`` is accepted for interface symmetry; the procedure is deterministic.
    """
    X, y = _table_arrays(table)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("logistic regression needs binary labels")
    w = np.zeros(X.shape[1])
    b = 0.0
    yf = y.astype(np.float64)
    history = []
    for _ in range(epochs):
        loss, gw, gb = logistic_loss_and_grad(w, b, X, yf)
        history.append(loss)
        w -= lr * gw
        b -= lr * gb
    return LogRegModel(w, b, history)


# ---------------------------------------------------------------------------
# dispatch + serialization
# ---------------------------------------------------------------------------

TabularModel = DecisionTree | ForestModel | LogRegModel


def _node_to_dict(node: TreeNode) -> dict:
    d = {"counts": [float(c) for c in node.class_counts]}
    if not node.is_leaf:
        d.update(
            feature=node.feature,
            threshold=node.threshold,
            left=_node_to_dict(node.left),
            right=_node_to_dict(node.right),
        )
    return d


def _node_from_dict(d: dict) -> TreeNode:
    node = TreeNode(np.array(d["counts"], dtype=np.float64))
    if "feature" in d:
        node.feature = int(d["feature"])
        node.threshold = float(d["threshold"])
        node.left = _node_from_dict(d["left"])
        node.right = _node_from_dict(d["right"])
    return node


def _tree_to_dict(tree: DecisionTree) -> dict:
    return {"n_features": tree.n_features, "n_classes": tree.n_classes, "root": _node_to_dict(tree.root)}


def _tree_from_dict(d: dict) -> DecisionTree:
    return DecisionTree(_node_from_dict(d["root"]), int(d["n_features"]), int(d["n_classes"]))


def model_to_dict(model: TabularModel) -> dict:
    if isinstance(model, DecisionTree):
        body = {"kind": "tree", "tree": _tree_to_dict(model)}
    elif isinstance(model, ForestModel):
        body = {"kind": "forest", "params": asdict(model.params), "trees": [_tree_to_dict(t) for t in model.trees]}
    elif isinstance(model, LogRegModel):
        body = {"kind": "logreg", "weights": [float(w) for w in model.weights], "bias": float(model.bias)}
    else:
        raise TypeError(f"not a tabular model: {type(model).__name__}")
    return {"format": MODEL_FORMAT, **body}


def model_from_dict(d: dict) -> TabularModel:
    if d.get("format") != MODEL_FORMAT:
        raise ValueError(f"unsupported model format {d.get('format')!r}")
    kind = d["kind"]
    if kind == "tree":
        return _tree_from_dict(d["tree"])
    if kind == "forest":
        p = dict(d["params"])
        p["tree"] = TreeParams(**p["tree"])
        return ForestModel([_tree_from_dict(t) for t in d["trees"]], ForestParams(**p))
    if kind == "logreg":
        return LogRegModel(np.array(d["weights"], dtype=np.float64), float(d["bias"]))
    raise ValueError(f"unknown model kind {kind!r}")


def save_model(model: TabularModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)), encoding="utf-8")


def load_model(path: str | Path) -> TabularModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
