"""Exact top-K retrieval over embedding sets and Label-Homogeneity@K.

Two metrics: Euclidean distance over continuous vectors and the leaf-overlap
distance 1 - matches/T over leaf-index vectors (normalized Hamming). The
index is deliberately brute force; ordering is canonical via (distance,
ascending id) so results never depend on input order.
"""

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels


class KindMismatchError(Exception):
    pass


class IndexError_(Exception):
    pass


EMBEDDING_SOURCES = ("ae", "mlp_binary", "mlp_family", "gbdt_binary",
                     "gbdt_binary_famfeat", "gbdt_family", "raw_features")


@dataclass
class EmbeddingSet:
    ids: list
    vectors: np.ndarray
    labels_binary: np.ndarray
    labels_family: np.ndarray | None = None
    kind: str = "continuous"  # or "leaf_index"
    source: str = "raw_features"

    def __post_init__(self):
        if len(self.ids) != len(set(self.ids)):
            raise ValueError("embedding ids must be unique")
        if self.vectors.shape[0] != len(self.ids):
            raise ValueError("ids and vectors are misaligned")
        if self.kind not in ("continuous", "leaf_index"):
            raise ValueError(f"unknown kind {self.kind!r}")

    def __len__(self):
        return len(self.ids)


def euclidean_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("dimension mismatch")
    diff = a - b
    return float(np.sqrt(np.dot(diff, diff)))


def leaf_overlap_distance(a, b) -> float:
    """1 - (matching leaf positions / tree count)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise KindMismatchError("leaf vectors must have equal tree counts")
    return float(1.0 - (a == b).mean())


@dataclass
class Index:
    embeddings: EmbeddingSet
    metric: str  # "euclidean" | "leaf-overlap"
    _id_rank: np.ndarray = field(init=False, repr=False)
    _id_pos: dict = field(init=False, repr=False)

    def __post_init__(self):
        if self.metric == "leaf-overlap" and self.embeddings.kind != "leaf_index":
            raise KindMismatchError(
                "leaf-overlap metric requires a leaf_index embedding set"
            )
        if self.metric not in ("euclidean", "leaf-overlap"):
            raise ValueError(f"unknown metric {self.metric!r}")
        order = sorted(range(len(self.embeddings)), key=lambda i: self.embeddings.ids[i])
        rank = np.empty(len(order), dtype=np.int64)
        rank[order] = np.arange(len(order))
        self._id_rank = rank
        self._id_pos = {name: i for i, name in enumerate(self.embeddings.ids)}

    def _distance_block(self, Q: np.ndarray) -> np.ndarray:
        vec = self.embeddings.vectors
        if self.metric == "euclidean":
            return np.sqrt(np.maximum(kernels.sq_dist_matrix(Q, vec), 0.0))
        T = vec.shape[1]
        return kernels.mismatch_matrix(Q, vec).astype(np.float64) / T


def build_index(embeddings: EmbeddingSet, metric: str = "euclidean") -> Index:
    if len(embeddings) < 2:
        raise IndexError_("index needs at least 2 points")
    return Index(embeddings, metric)


def _order_row(index: Index, dists: np.ndarray) -> np.ndarray:
    return np.lexsort((index._id_rank, dists))


def query_topk(index: Index, query, k: int, exclude_self: bool = True):
    """Top-k neighbors as (id, distance), ascending distance, ties by id.

    `query` is an id present in the index (self excluded when exclude_self)
    or a raw vector. k is clamped to the available neighbor count.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    emb = index.embeddings
    self_pos = None
    if isinstance(query, str):
        if query not in index._id_pos:
            raise KeyError(f"unknown id {query!r}")
        self_pos = index._id_pos[query]
        qvec = emb.vectors[self_pos]
    else:
        qvec = np.asarray(query)
        exclude_self = False
    dists = index._distance_block(qvec[None, :])[0]
    if exclude_self and self_pos is not None:
        dists = dists.copy()
        dists[self_pos] = np.inf
    avail = len(emb) - (1 if exclude_self and self_pos is not None else 0)
    if k > avail:
        warnings.warn(f"k={k} clamped to {avail} available neighbors")
        k = avail
    order = _order_row(index, dists)[:k]
    return [(emb.ids[i], float(dists[i])) for i in order]


@dataclass
class HomogeneityReport:
    metric: str
    source: str
    n: int
    per_k: dict  # K -> {group -> {"mean", "std", "n"}}

    def to_json(self):
        return {
            "metric": self.metric,
            "source": self.source,
            "n": self.n,
            "per_k": {str(k): v for k, v in self.per_k.items()},
        }

    def to_csv_rows(self):
        header = ["K", "Benign Mean", "Benign Std", "Malicious Mean",
                  "Malicious Std", "All Mean", "All Std"]
        rows = [header]
        for k in sorted(self.per_k):
            g = self.per_k[k]
            rows.append([
                k,
                g["benign"]["mean"], g["benign"]["std"],
                g["malicious"]["mean"], g["malicious"]["std"],
                g["all"]["mean"], g["all"]["std"],
            ])
        return rows


def label_homogeneity_at_k(index: Index, k_list, label_field: str = "binary",
                           sample: int | None = None, seed: int = 0) -> HomogeneityReport:
    """Per-query count of top-K neighbors sharing the query's label.

    Every point is a query (self excluded) unless `sample` caps the query
    count (seeded uniform choice). Means/population stds are reported per
    binary class group and overall.
    """
    emb = index.embeddings
    n = len(emb)
    k_list = sorted(set(int(k) for k in k_list))
    k_max = max(k_list)
    if n <= k_max:
        raise IndexError_(f"need more than K={k_max} points, have {n}")
    if label_field == "binary":
        labels = emb.labels_binary
    elif label_field == "family":
        if emb.labels_family is None:
            raise ValueError("embedding set has no family labels")
        labels = emb.labels_family
    else:
        raise ValueError(f"unknown label_field {label_field!r}")

    queries = np.arange(n)
    if sample is not None and sample < n:
        queries = np.sort(np.random.default_rng(seed).choice(n, size=sample, replace=False))

    counts = np.empty((queries.size, len(k_list)), dtype=np.int64)
    chunk = 256
    for start in range(0, queries.size, chunk):
        block = queries[start : start + chunk]
        dmat = index._distance_block(emb.vectors[block])
        for r, q in enumerate(block):
            row = dmat[r]
            row[q] = np.inf  # exclude self
            order = _order_row(index, row)[:k_max]
            matches = (labels[order] == labels[q]).astype(np.int64)
            cum = np.cumsum(matches)
            counts[start + r] = [cum[k - 1] for k in k_list]

    groups = {
        "benign": emb.labels_binary[queries] == 0,
        "malicious": emb.labels_binary[queries] == 1,
    }
    per_k = {}
    for j, k in enumerate(k_list):
        col = counts[:, j].astype(np.float64)
        entry = {}
        for name, mask in groups.items():
            vals = col[mask]
            entry[name] = {
                "mean": float(vals.mean()) if vals.size else 0.0,
                "std": float(vals.std()) if vals.size else 0.0,  # population std
                "n": int(vals.size),
            }
        entry["all"] = {"mean": float(col.mean()), "std": float(col.std()), "n": int(col.size)}
        per_k[k] = entry
    return HomogeneityReport(index.metric, emb.source, int(queries.size), per_k)


# ---------------------------------------------------------------------------
# embedding file IO: CSV matrix plus JSON sidecar


def save_embedding_set(out_dir, emb: EmbeddingSet, metric_default: str = "euclidean"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sidecar = {
        "kind": emb.kind,
        "source": emb.source,
        "d": int(emb.vectors.shape[1]),
        "metric_default": metric_default,
    }
    (out_dir / "embeddings.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    with open(out_dir / "embeddings.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "family"] +
                        [f"e{j}" for j in range(emb.vectors.shape[1])])
        fam = emb.labels_family
        for i in range(len(emb)):
            f = "" if fam is None or fam[i] < 0 else int(fam[i])
            if emb.kind == "leaf_index":
                vals = [int(v) for v in emb.vectors[i]]
            else:
                vals = [np.format_float_positional(v, trim="0") for v in emb.vectors[i]]
            writer.writerow([emb.ids[i], int(emb.labels_binary[i]), f] + vals)


def load_embedding_set(in_dir) -> EmbeddingSet:
    in_dir = Path(in_dir)
    sidecar = json.loads((in_dir / "embeddings.json").read_text())
    ids, labels, fams, rows = [], [], [], []
    with open(in_dir / "embeddings.csv", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            ids.append(row[0])
            labels.append(int(row[1]))
            fams.append(int(row[2]) if row[2] != "" else -1)
            rows.append(row[3:])
    if sidecar["kind"] == "leaf_index":
        vectors = np.asarray(rows, dtype=np.int64)
    else:
        vectors = np.asarray(rows, dtype=np.float64)
    fam_arr = np.asarray(fams, dtype=np.int64)
    return EmbeddingSet(
        ids, vectors, np.asarray(labels, dtype=np.int64),
        fam_arr if (fam_arr >= 0).any() else None,
        sidecar["kind"], sidecar["source"],
    )
