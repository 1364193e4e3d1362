"""Clustering-validity and classification metrics.

Clustering side: Silhouette (Euclidean, singleton convention s=0),
Davies-Bouldin and Calinski-Harabasz. Classification side: accuracy,
per-class precision/recall/F1 with macro and weighted averaging, ROC-AUC via
the Mann-Whitney rank statistic (tied pairs count 1/2), one-vs-rest AUC, and
top-k accuracy.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels


class MetricUndefinedError(Exception):
    pass


@dataclass
class ClusterMetricsReport:
    silhouette: float
    davies_bouldin: float
    calinski_harabasz: float
    n: int
    k: int
    ch_infinite: bool = False

    def to_json(self):
        return {
            "silhouette": self.silhouette,
            "davies_bouldin": self.davies_bouldin,
            "calinski_harabasz": "inf" if self.ch_infinite else self.calinski_harabasz,
            "n": self.n,
            "k": self.k,
        }


# ---------------------------------------------------------------------------
# clustering metrics


def _check_labels(X, labels):
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    if X.shape[0] != labels.size:
        raise ValueError("embeddings and labels are misaligned")
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise MetricUndefinedError("need at least 2 clusters")
    return X, labels, uniq


def silhouette(X, labels) -> float:
    """Mean of s(i) = (b - a)/max(a, b) with Euclidean distances.

    a(i): mean distance to same-cluster points (self excluded); b(i): minimum
    over other clusters of the mean distance. Singleton members score 0.
    """
    X, labels, uniq = _check_labels(X, labels)
    D = np.sqrt(np.maximum(kernels.sq_dist_matrix(X, X), 0.0))
    n = X.shape[0]
    masks = {c: labels == c for c in uniq}
    sizes = {c: int(masks[c].sum()) for c in uniq}
    # per-point mean distance to each cluster
    sums = np.stack([D[:, masks[c]].sum(axis=1) for c in uniq], axis=1)
    scores = np.zeros(n)
    for i in range(n):
        ci = labels[i]
        if sizes[ci] == 1:
            continue
        a = None
        b = math.inf
        for j, c in enumerate(uniq):
            if c == ci:
                a = sums[i, j] / (sizes[c] - 1)
            else:
                b = min(b, sums[i, j] / sizes[c])
        scores[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(scores.mean())


def davies_bouldin(X, labels) -> float:
    """Mean over clusters of the worst (S_i + S_j) / M_ij ratio."""
    X, labels, uniq = _check_labels(X, labels)
    centroids = np.stack([X[labels == c].mean(axis=0) for c in uniq])
    scatter = np.array([
        np.sqrt(np.maximum(kernels.sq_dist_matrix(X[labels == c], centroids[j : j + 1]), 0.0)).mean()
        for j, c in enumerate(uniq)
    ])
    M = np.sqrt(np.maximum(kernels.sq_dist_matrix(centroids, centroids), 0.0))
    k = uniq.size
    total = 0.0
    for i in range(k):
        worst = 0.0
        for j in range(k):
            if i == j:
                continue
            if M[i, j] == 0.0:
                if scatter[i] + scatter[j] > 0:
                    raise MetricUndefinedError(
                        "coincident centroids with nonzero scatter"
                    )
                continue  # zero scatter and zero separation: ratio defined as 0
            worst = max(worst, (scatter[i] + scatter[j]) / M[i, j])
        total += worst
    return total / k


def calinski_harabasz(X, labels):
    """Tr(B)/(k-1) over Tr(W)/(n-k); returns (value, is_infinite)."""
    X, labels, uniq = _check_labels(X, labels)
    n, k = X.shape[0], uniq.size
    if n <= k:
        raise MetricUndefinedError("need more samples than clusters")
    mu = X.mean(axis=0)
    tr_b = 0.0
    tr_w = 0.0
    for c in uniq:
        block = X[labels == c]
        mu_c = block.mean(axis=0)
        tr_b += block.shape[0] * float(((mu_c - mu) ** 2).sum())
        tr_w += float(((block - mu_c) ** 2).sum())
    if tr_w == 0.0:
        return math.inf, True
    return (tr_b / (k - 1)) / (tr_w / (n - k)), False


def cluster_metrics_report(X, labels) -> ClusterMetricsReport:
    ch, inf_flag = calinski_harabasz(X, labels)
    return ClusterMetricsReport(
        silhouette=silhouette(X, labels),
        davies_bouldin=davies_bouldin(X, labels),
        calinski_harabasz=ch,
        n=int(np.asarray(labels).size),
        k=int(np.unique(labels).size),
        ch_infinite=inf_flag,
    )


# ---------------------------------------------------------------------------
# classification metrics


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def binary_auc(y_true, scores) -> float:
    """ROC-AUC by the Mann-Whitney statistic; ties contribute 1/2 per pair."""
    y_true = np.asarray(y_true)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int((y_true == 1).sum())
    n_neg = int((y_true == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUC needs both classes present")
    ranks = _average_ranks(scores)
    r_pos = ranks[y_true == 1].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class ClassificationReport:
    accuracy: float
    precision: dict
    recall: dict
    f1: dict
    support: dict
    macro: dict
    weighted: dict
    confusion: np.ndarray
    roc_auc: float | None = None
    roc_auc_ovr_macro: float | None = None
    roc_auc_ovr_weighted: float | None = None
    top_k_accuracy: float | None = None
    top_k: int | None = None
    zero_division_classes: list = field(default_factory=list)
    skipped_auc_classes: list = field(default_factory=list)

    def to_json(self):
        out = {
            "accuracy": self.accuracy,
            "per_class": {
                str(c): {
                    "precision": self.precision[c],
                    "recall": self.recall[c],
                    "f1": self.f1[c],
                    "support": self.support[c],
                }
                for c in self.precision
            },
            "macro": self.macro,
            "weighted": self.weighted,
            "confusion": self.confusion.tolist(),
            "zero_division_classes": [str(c) for c in self.zero_division_classes],
        }
        for key in ("roc_auc", "roc_auc_ovr_macro", "roc_auc_ovr_weighted",
                    "top_k_accuracy", "top_k"):
            val = getattr(self, key)
            if val is not None:
                out[key] = val
        if self.skipped_auc_classes:
            out["skipped_auc_classes"] = [str(c) for c in self.skipped_auc_classes]
        return out


def confusion_matrix(y_true, y_pred, n_classes):
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def top_k_accuracy(y_true, score_matrix, k) -> float:
    """Hit when the true class is among the k best scores; score ties prefer
    the lower class index (matching a deterministic argsort)."""
    scores = np.asarray(score_matrix, dtype=np.float64)
    n = scores.shape[0]
    hits = 0
    for i in range(n):
        order = np.lexsort((np.arange(scores.shape[1]), -scores[i]))
        if y_true[i] in order[:k]:
            hits += 1
    return hits / n


def roc_auc_ovr(y_true, score_matrix, averaging: str = "macro"):
    """One-vs-rest AUC per class, macro or support-weighted average.

    Classes absent from y_true are skipped; returns (value, skipped_classes).
    """
    y_true = np.asarray(y_true)
    scores = np.asarray(score_matrix, dtype=np.float64)
    aucs, weights, skipped = [], [], []
    for c in range(scores.shape[1]):
        pos = (y_true == c).astype(np.int64)
        n_pos = int(pos.sum())
        if n_pos == 0 or n_pos == pos.size:
            skipped.append(c)
            continue
        aucs.append(binary_auc(pos, scores[:, c]))
        weights.append(n_pos)
    if not aucs:
        raise MetricUndefinedError("no class with both positives and negatives")
    if averaging == "macro":
        return float(np.mean(aucs)), skipped
    if averaging == "weighted":
        return float(np.average(aucs, weights=weights)), skipped
    raise ValueError(f"unknown averaging {averaging!r}")


def classification_report(y_true, y_pred, scores=None, top_k=None) -> ClassificationReport:
    """Standard definitions; zero-division classes yield 0 and are flagged.

    `scores` enables AUC: a 1-d score vector for binary problems, an (n, K)
    matrix for multiclass (also required for top_k).
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size != y_pred.size:
        raise ValueError("y_true and y_pred are misaligned")
    n_classes = int(max(y_true.max(), y_pred.max())) + 1
    cm = confusion_matrix(y_true, y_pred, n_classes)
    n = y_true.size
    accuracy = float(np.trace(cm) / n)
    precision, recall, f1, support = {}, {}, {}, {}
    zero_div = []
    for c in range(n_classes):
        tp = int(cm[c, c])
        pred_c = int(cm[:, c].sum())
        true_c = int(cm[c].sum())
        if pred_c == 0 or true_c == 0:
            zero_div.append(c)
        precision[c] = tp / pred_c if pred_c else 0.0
        recall[c] = tp / true_c if true_c else 0.0
        denom = precision[c] + recall[c]
        f1[c] = 2 * precision[c] * recall[c] / denom if denom else 0.0
        support[c] = true_c
    supports = np.array([support[c] for c in range(n_classes)], dtype=np.float64)
    macro = {
        "precision": float(np.mean([precision[c] for c in range(n_classes)])),
        "recall": float(np.mean([recall[c] for c in range(n_classes)])),
        "f1": float(np.mean([f1[c] for c in range(n_classes)])),
    }
    weighted = {
        key: float(np.average([vals[c] for c in range(n_classes)], weights=supports))
        for key, vals in (("precision", precision), ("recall", recall), ("f1", f1))
    }
    report = ClassificationReport(accuracy, precision, recall, f1, support,
                                  macro, weighted, cm, zero_division_classes=zero_div)
    if scores is not None:
        scores = np.asarray(scores, dtype=np.float64)
        if scores.ndim == 1:
            report.roc_auc = binary_auc(y_true, scores)
        else:
            report.roc_auc_ovr_macro, skipped = roc_auc_ovr(y_true, scores, "macro")
            report.roc_auc_ovr_weighted, _ = roc_auc_ovr(y_true, scores, "weighted")
            report.skipped_auc_classes = skipped
            if top_k is not None:
                report.top_k_accuracy = top_k_accuracy(y_true, scores, top_k)
                report.top_k = top_k
    elif top_k is not None:
        raise ValueError("top_k accuracy requires scores")
    return report
