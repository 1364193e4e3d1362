"""Second-order gradient-boosted regression trees, written from scratch.

Supports a logistic objective for binary labels and a softmax objective for
multiclass, exact greedy split search (see kernels.best_split), cross-validated
grid search, and leaf-index embedding extraction. Leaf ids are dense per tree
in left-first preorder, so identical inputs always map to identical leaf
vectors.
"""

import itertools
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import kernels


class TrainingError(Exception):
    pass


class GbdtConfigError(Exception):
    pass


@dataclass
class TreeNode:
    feature_index: int = -1
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    leaf_id: int = -1
    weight: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass
class Hyperparams:
    max_depth: int = 6
    learning_rate: float = 0.1
    reg_lambda: float = 1.0
    gamma: float = 0.0
    min_child_weight: float = 1.0


@dataclass
class GbdtModel:
    objective: str  # "logistic" | "softmax"
    n_classes: int
    trees: list
    rounds: int
    trees_per_round: int
    hyperparams: Hyperparams
    base_score: float = 0.0
    n_features: int = 0
    loss_history: list = field(default_factory=list)

    @property
    def n_trees(self) -> int:
        return len(self.trees)


def _assign_leaf_ids(root: TreeNode) -> int:
    counter = 0
    stack = [root]
    # left-first preorder gives dense, structure-determined leaf numbering
    while stack:
        node = stack.pop()
        if node.is_leaf:
            node.leaf_id = counter
            counter += 1
        else:
            stack.append(node.right)
            stack.append(node.left)
    return counter


def _grow_tree(X, rows, g, h, hp: Hyperparams):
    """Greedy depth-bounded growth; returns (root, leaves) where leaves is a
    list of (leaf_node, routed_training_rows) pairs."""
    root = TreeNode()
    frontier = [(root, rows, 0)]
    pending = []  # (node, rows) for finished leaves
    while frontier:
        node, node_rows, depth = frontier.pop()
        if depth < hp.max_depth and node_rows.size >= 2:
            feat, thr, gain = kernels.best_split(
                X[node_rows], g[node_rows], h[node_rows],
                hp.reg_lambda, hp.gamma, hp.min_child_weight,
            )
        else:
            feat = -1
        if feat < 0:
            G = g[node_rows].sum()
            H = h[node_rows].sum()
            node.weight = -G / (H + hp.reg_lambda)
            pending.append((node, node_rows))
            continue
        node.feature_index = int(feat)
        node.threshold = float(thr)
        go_left = X[node_rows, feat] < thr
        node.left = TreeNode()
        node.right = TreeNode()
        frontier.append((node.right, node_rows[~go_left], depth + 1))
        frontier.append((node.left, node_rows[go_left], depth + 1))
    _assign_leaf_ids(root)
    return root, pending


def _tree_leaf(root: TreeNode, x) -> TreeNode:
    node = root
    while not node.is_leaf:
        node = node.left if x[node.feature_index] < node.threshold else node.right
    return node


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(Z):
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def _logloss(y, p):
    p = np.clip(p, 1e-15, 1 - 1e-15)
    return float(-(y * np.log(p) + (1 - y) * np.log(1 - p)).mean())


def _softmax_loss(y, P):
    return float(-np.log(np.clip(P[np.arange(y.size), y], 1e-15, None)).mean())


def train_gbdt(X, y, objective: str = "logistic",
               hyperparams: Hyperparams | None = None,
               rounds: int = 100) -> GbdtModel:
    """Boost `rounds` rounds; per round one tree (logistic) or K trees (softmax).

    Each round fits trees to the gradient/hessian of the loss at the current
    margins; leaf weight is -G/(H+lambda); margins move by eta * weight.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if rounds <= 0:
        raise GbdtConfigError("rounds must be positive")
    if not np.all(np.isfinite(X)):
        raise TrainingError("non-finite feature values")
    hp = hyperparams or Hyperparams()
    n = X.shape[0]
    all_rows = np.arange(n)
    model = GbdtModel(objective, 0, [], rounds, 1, hp, n_features=X.shape[1])

    if objective == "logistic":
        y = y.astype(np.float64)
        F = np.full(n, model.base_score)
        for _ in range(rounds):
            p = _sigmoid(F)
            g = p - y
            h = p * (1.0 - p)
            root, leaves = _grow_tree(X, all_rows, g, h, hp)
            for node, node_rows in leaves:
                F[node_rows] += hp.learning_rate * node.weight
            model.trees.append(root)
            model.loss_history.append(_logloss(y, _sigmoid(F)))
        model.n_classes = 2
    elif objective == "softmax":
        y = y.astype(np.int64)
        K = int(y.max()) + 1
        if K < 2:
            raise GbdtConfigError("softmax objective needs at least 2 classes")
        model.trees_per_round = K
        model.n_classes = K
        F = np.full((n, K), model.base_score)
        for _ in range(rounds):
            P = _softmax(F)
            for k in range(K):
                g = P[:, k] - (y == k)
                h = np.maximum(P[:, k] * (1.0 - P[:, k]), 1e-16)
                root, leaves = _grow_tree(X, all_rows, g, h, hp)
                for node, node_rows in leaves:
                    F[node_rows, k] += hp.learning_rate * node.weight
                model.trees.append(root)
            model.loss_history.append(_softmax_loss(y, _softmax(F)))
    else:
        raise GbdtConfigError(f"unknown objective {objective!r}")
    return model


def predict_margin(model: GbdtModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.n_features:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {model.n_features}")
    eta = model.hyperparams.learning_rate
    if model.objective == "logistic":
        F = np.full(X.shape[0], model.base_score)
        for root in model.trees:
            for i in range(X.shape[0]):
                F[i] += eta * _tree_leaf(root, X[i]).weight
        return F
    K = model.trees_per_round
    F = np.full((X.shape[0], K), model.base_score)
    for t, root in enumerate(model.trees):
        k = t % K
        for i in range(X.shape[0]):
            F[i, k] += eta * _tree_leaf(root, X[i]).weight
    return F


def predict_proba(model: GbdtModel, X) -> np.ndarray:
    """Sigmoid of the margin (logistic) or softmax row distribution."""
    F = predict_margin(model, X)
    if model.objective == "logistic":
        return _sigmoid(F)
    return _softmax(F)


def leaf_embedding(model: GbdtModel, X, class_index: int | None = None) -> np.ndarray:
    """Leaf-index vector per sample, one entry per tree in ensemble order.

    For softmax models `class_index` restricts the vector to that class's
    trees (rounds entries instead of rounds * K).
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.n_features:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {model.n_features}")
    trees = model.trees
    if class_index is not None:
        if model.objective != "softmax":
            raise GbdtConfigError("class_index only applies to softmax models")
        trees = model.trees[class_index :: model.trees_per_round]
    out = np.empty((X.shape[0], len(trees)), dtype=np.int64)
    for t, root in enumerate(trees):
        for i in range(X.shape[0]):
            out[i, t] = _tree_leaf(root, X[i]).leaf_id
    return out


# ---------------------------------------------------------------------------
# cross-validated grid search


def stratified_folds(y, folds: int, seed: int):
    """Per-class round-robin fold assignment after a seeded shuffle."""
    y = np.asarray(y)
    if folds < 2:
        raise GbdtConfigError("folds must be >= 2")
    rng = np.random.default_rng(seed)
    assignment = np.empty(y.size, dtype=np.int64)
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        if idx.size < folds:
            raise GbdtConfigError(
                f"class {cls} has {idx.size} samples, fewer than {folds} folds"
            )
        perm = rng.permutation(idx)
        assignment[perm] = np.arange(perm.size) % folds
    return assignment


def grid_search_cv(X, y, grid: dict, folds: int = 3, seed: int = 0,
                   objective: str = "logistic") -> dict:
    """Pick {max_depth, rounds, learning_rate} maximizing mean held-out accuracy.

    Ties break toward smaller depth, then fewer rounds, then grid order.
    """
    combos = list(itertools.product(
        grid.get("max_depth", [6]),
        grid.get("rounds", [100]),
        grid.get("learning_rate", [0.1]),
    ))
    if not combos:
        raise GbdtConfigError("empty grid")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    assignment = stratified_folds(y, folds, seed)
    best = None
    for order, (depth, rounds, lr) in enumerate(combos):
        accs = []
        for f in range(folds):
            tr = assignment != f
            te = ~tr
            hp = Hyperparams(max_depth=depth, learning_rate=lr)
            model = train_gbdt(X[tr], y[tr], objective, hp, rounds=rounds)
            p = predict_proba(model, X[te])
            pred = (p >= 0.5).astype(np.int64) if objective == "logistic" else p.argmax(axis=1)
            accs.append(float((pred == y[te]).mean()))
        key = (-float(np.mean(accs)), depth, rounds, order)
        if best is None or key < best[0]:
            best = (key, {"max_depth": depth, "rounds": rounds, "learning_rate": lr,
                          "mean_accuracy": float(np.mean(accs))})
    return best[1]


# ---------------------------------------------------------------------------
# JSON serialization (bit-faithful floats via shortest-repr round-trip)


def _node_to_json(node: TreeNode):
    if node.is_leaf:
        return {"leaf_id": node.leaf_id, "weight": node.weight}
    return {
        "feature_index": node.feature_index,
        "threshold": node.threshold,
        "left": _node_to_json(node.left),
        "right": _node_to_json(node.right),
    }


def _node_from_json(d) -> TreeNode:
    if "leaf_id" in d:
        return TreeNode(leaf_id=d["leaf_id"], weight=d["weight"])
    return TreeNode(
        feature_index=d["feature_index"],
        threshold=d["threshold"],
        left=_node_from_json(d["left"]),
        right=_node_from_json(d["right"]),
    )


def model_to_json(model: GbdtModel) -> str:
    doc = {
        "objective": model.objective,
        "n_classes": model.n_classes,
        "rounds": model.rounds,
        "trees_per_round": model.trees_per_round,
        "base_score": model.base_score,
        "n_features": model.n_features,
        "hyperparams": asdict(model.hyperparams),
        "loss_history": model.loss_history,
        "trees": [_node_to_json(t) for t in model.trees],
    }
    return json.dumps(doc, sort_keys=True)


def model_from_json(text: str) -> GbdtModel:
    doc = json.loads(text)
    return GbdtModel(
        objective=doc["objective"],
        n_classes=doc["n_classes"],
        trees=[_node_from_json(t) for t in doc["trees"]],
        rounds=doc["rounds"],
        trees_per_round=doc["trees_per_round"],
        hyperparams=Hyperparams(**doc["hyperparams"]),
        base_score=doc["base_score"],
        n_features=doc["n_features"],
        loss_history=doc["loss_history"],
    )
