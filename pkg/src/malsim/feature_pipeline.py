"""EMBER-style JSONL parsing, flattening, vectorization, normalization and splits.

The input is newline-delimited JSON with EMBER 2018 field names plus an
optional ``avclass`` family tag. Nested forms are flattened here: the
``imports`` library->functions map is unrolled into "lib:func" strings,
section property lists are pooled, and nested header dicts become dotted
scalar columns.
"""

import csv
import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class EmptyCorpusError(Exception):
    pass


class VectorizationError(Exception):
    pass


class ConfigError(Exception):
    pass


BOW_FIELDS = ("imports", "exports", "section_properties")


@dataclass
class RawRecord:
    sha256: str
    label: int | None  # 0 benign, 1 malicious, None unknown
    avclass: str | None
    histogram: np.ndarray | list
    byteentropy: np.ndarray | list
    printabledist: np.ndarray | list
    imports: list
    exports: list
    section_properties: list
    header_fields: dict


@dataclass
class Vocabulary:
    field_name: str
    token_to_index: dict
    cap: int = 2048

    def __len__(self):
        return len(self.token_to_index)


@dataclass
class LayoutConfig:
    histogram_size: int = 256
    byteentropy_size: int = 256
    printabledist_size: int = 96
    imports_cap: int = 2048
    exports_cap: int = 2048
    sections_cap: int = 2048
    header_fields: tuple = ()
    binarize_bow: bool = False

    @property
    def dim(self) -> int:
        return (
            self.histogram_size
            + self.byteentropy_size
            + self.printabledist_size
            + self.imports_cap
            + self.exports_cap
            + self.sections_cap
            + len(self.header_fields)
        )

    def block_offsets(self) -> dict:
        names_sizes = [
            ("histogram", self.histogram_size),
            ("byteentropy", self.byteentropy_size),
            ("printabledist", self.printabledist_size),
            ("imports", self.imports_cap),
            ("exports", self.exports_cap),
            ("section_properties", self.sections_cap),
            ("header", len(self.header_fields)),
        ]
        out = {}
        off = 0
        for name, size in names_sizes:
            out[name] = (off, off + size)
            off += size
        return out

    def to_json(self) -> dict:
        return {
            "histogram_size": self.histogram_size,
            "byteentropy_size": self.byteentropy_size,
            "printabledist_size": self.printabledist_size,
            "imports_cap": self.imports_cap,
            "exports_cap": self.exports_cap,
            "sections_cap": self.sections_cap,
            "header_fields": list(self.header_fields),
            "binarize_bow": self.binarize_bow,
        }

    @classmethod
    def from_json(cls, d: dict) -> "LayoutConfig":
        d = dict(d)
        d["header_fields"] = tuple(d.get("header_fields", ()))
        return cls(**d)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray  # divisor actually used (1.0 where raw std < epsilon)
    epsilon: float = 1e-8


@dataclass
class LabeledDataset:
    ids: list
    X: np.ndarray
    y_binary: np.ndarray
    y_family: np.ndarray | None = None
    family_name_map: dict = field(default_factory=dict)  # index -> name
    split: np.ndarray | None = None  # "train" / "test" per row

    def __len__(self):
        return len(self.ids)

    def rows(self, which: str) -> np.ndarray:
        if self.split is None:
            raise ValueError("dataset has no split assignment")
        return np.flatnonzero(self.split == which)


# ---------------------------------------------------------------------------
# parsing


def _flatten_header(obj, prefix="") -> dict:
    out = {}
    for key in obj:
        val = obj[key]
        name = f"{prefix}{key}"
        if isinstance(val, dict):
            out.update(_flatten_header(val, name + "."))
        elif isinstance(val, bool):
            out[name] = float(val)
        elif isinstance(val, (int, float)):
            out[name] = float(val)
        # strings and lists inside headers carry no scalar value; skipped
    return out


def _unroll_imports(obj) -> list:
    if isinstance(obj, dict):
        flat = []
        for lib, funcs in obj.items():
            for fn in funcs:
                flat.append(f"{lib}:{fn}")
        return flat
    return list(obj)


def _section_props(raw: dict) -> list:
    if "section_properties" in raw:
        return list(raw["section_properties"])
    sect = raw.get("section", {})
    props = []
    for entry in sect.get("sections", []):
        props.extend(entry.get("props", []))
    return props


def _record_from_json(raw: dict) -> RawRecord:
    sha = raw.get("sha256")
    if not sha or not isinstance(sha, str):
        raise ValueError("missing sha256")
    label = raw.get("label", None)
    if label not in (0, 1):
        label = None
    strings = raw.get("strings", {})
    header = raw.get("header_fields")
    if header is None:
        header = _flatten_header(raw.get("header", {}))
    return RawRecord(
        sha256=sha,
        label=label,
        avclass=raw.get("avclass") or None,
        histogram=raw.get("histogram", []),
        byteentropy=raw.get("byteentropy", []),
        printabledist=raw.get("printabledist", strings.get("printabledist", [])),
        imports=_unroll_imports(raw.get("imports", [])),
        exports=list(raw.get("exports", [])),
        section_properties=_section_props(raw),
        header_fields=header,
    )


def parse_records(lines, allow_empty: bool = False):
    """Parse a JSONL stream into RawRecords.

    `lines` is any iterable of strings (an open file works). Malformed lines
    are skipped, not fatal. Returns (records, n_skipped).
    """
    records = []
    skipped = 0
    saw_line = False
    for line in lines:
        if not line.strip():
            continue
        saw_line = True
        try:
            raw = json.loads(line)
            records.append(_record_from_json(raw))
        except (ValueError, TypeError, AttributeError):
            skipped += 1
    if saw_line and not records and not allow_empty:
        raise EmptyCorpusError("stream contained no valid records")
    return records, skipped


def _clean_array(values, non_negative=True):
    """Return a float64 array, or None when any entry is malformed."""
    try:
        arr = np.asarray(values, dtype=np.float64)
    except (ValueError, TypeError):
        return None
    if arr.ndim != 1 or not np.all(np.isfinite(arr)):
        return None
    if non_negative and np.any(arr < 0):
        return None
    return arr


def clean_and_dedup(records):
    """Drop malformed-array records and duplicates (first sha256 occurrence kept).

    Unknown-label records survive; they are dropped at task assembly.
    """
    seen = set()
    out = []
    for rec in records:
        if rec.sha256 in seen:
            continue
        hist = _clean_array(rec.histogram)
        bent = _clean_array(rec.byteentropy)
        prnt = _clean_array(rec.printabledist)
        if hist is None or bent is None or prnt is None:
            continue
        if not all(math.isfinite(v) for v in rec.header_fields.values()):
            continue
        seen.add(rec.sha256)
        rec.histogram, rec.byteentropy, rec.printabledist = hist, bent, prnt
        out.append(rec)
    return out


# ---------------------------------------------------------------------------
# vectorization


def build_vocabulary(records, field_name: str, cap: int = 2048) -> Vocabulary:
    """Frequency-ranked token vocabulary over a BoW field of training records.

    Ranking is by descending corpus frequency with lexicographic tie-break,
    truncated to `cap`.
    """
    if field_name not in BOW_FIELDS:
        raise ConfigError(f"unknown BoW field {field_name!r}")
    counts = Counter()
    for rec in records:
        counts.update(getattr(rec, field_name))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:cap]
    return Vocabulary(field_name, {tok: i for i, (tok, _) in enumerate(ranked)}, cap)


def vectorize(record: RawRecord, vocabularies: dict, layout: LayoutConfig) -> np.ndarray:
    """Produce the fixed-length feature vector of one cleaned record.

    Numeric distribution blocks are copied verbatim, BoW blocks hold
    occurrence counts (or presence bits with `binarize_bow`), out-of-vocab
    tokens are ignored, and missing header scalars impute as 0.
    """
    vec = np.zeros(layout.dim, dtype=np.float64)
    offsets = layout.block_offsets()
    for name, values, size in (
        ("histogram", record.histogram, layout.histogram_size),
        ("byteentropy", record.byteentropy, layout.byteentropy_size),
        ("printabledist", record.printabledist, layout.printabledist_size),
    ):
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape != (size,):
            raise VectorizationError(
                f"{record.sha256}: {name} has length {arr.size}, layout expects {size}"
            )
        lo, hi = offsets[name]
        vec[lo:hi] = arr
    for fname in BOW_FIELDS:
        vocab = vocabularies[fname]
        lo, _ = offsets[fname]
        for tok in getattr(record, fname):
            idx = vocab.token_to_index.get(tok)
            if idx is not None:
                vec[lo + idx] += 1.0
        if layout.binarize_bow:
            lo2, hi2 = offsets[fname]
            np.clip(vec[lo2:hi2], 0.0, 1.0, out=vec[lo2:hi2])
    lo, _ = offsets["header"]
    for j, fname in enumerate(layout.header_fields):
        vec[lo + j] = record.header_fields.get(fname, 0.0)
    return vec


def assemble_dataset(records, vocabularies, layout: LayoutConfig,
                     split=None) -> LabeledDataset:
    """Vectorize labeled records into a LabeledDataset; unknown labels drop here.

    Family indices follow lexicographic string indexing over families present.
    Records whose arrays mismatch the layout are rejected (skipped). `split`,
    when given, is a per-record train/test sequence aligned with `records`.
    """
    ids, rows, y_bin, fam_names, kept_split = [], [], [], [], []
    for i, rec in enumerate(records):
        if rec.label is None:
            continue
        try:
            vec = vectorize(rec, vocabularies, layout)
        except VectorizationError:
            continue
        ids.append(rec.sha256)
        rows.append(vec)
        y_bin.append(rec.label)
        fam_names.append(rec.avclass)
        if split is not None:
            kept_split.append(split[i])
    if not ids:
        raise EmptyCorpusError("no labeled records to assemble")
    X = np.vstack(rows)
    y_binary = np.asarray(y_bin, dtype=np.int64)
    present = sorted({f for f in fam_names if f is not None})
    y_family = None
    name_map = {}
    if present:
        index_of = {name: i for i, name in enumerate(present)}
        y_family = np.array([index_of.get(f, -1) for f in fam_names], dtype=np.int64)
        name_map = {i: name for name, i in index_of.items()}
    return LabeledDataset(ids, X, y_binary, y_family, name_map,
                          np.asarray(kept_split, dtype=str) if split is not None else None)


# ---------------------------------------------------------------------------
# normalization


def fit_normalizer(X_train: np.ndarray, epsilon: float = 1e-8) -> NormStats:
    """Per-column mean and population std from training rows only."""
    if X_train.shape[0] == 0:
        raise ValueError("cannot fit normalizer on an empty training set")
    mean = X_train.mean(axis=0)
    std = X_train.std(axis=0)  # population std
    std = np.where(std < epsilon, 1.0, std)
    return NormStats(mean, std, epsilon)


def apply_normalizer(stats: NormStats, X: np.ndarray) -> np.ndarray:
    return (X - stats.mean) / stats.std


# ---------------------------------------------------------------------------
# splitting and task assembly


def stratified_assignment(labels: np.ndarray, train_fraction: float, seed: int,
                          drop_singletons: bool = False):
    """Per-row train/test assignment preserving class proportions.

    Returns (split, keep): split is a string array, keep flags rows whose
    class survived (singleton classes drop only when drop_singletons).
    """
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError("train_fraction must be in (0, 1)")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    keep = np.ones(labels.size, dtype=bool)
    split = np.empty(labels.size, dtype=object)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if drop_singletons and idx.size < 2:
            warnings.warn(f"dropping class {cls} with {idx.size} member(s)")
            keep[idx] = False
            continue
        perm = rng.permutation(idx)
        n_train = int(round(train_fraction * idx.size))
        split[perm[:n_train]] = "train"
        split[perm[n_train:]] = "test"
    return split, keep


def stratified_split(dataset: LabeledDataset, train_fraction: float, seed: int,
                     by: str = "binary") -> LabeledDataset:
    """Assign per-row train/test membership, stratified by class.

    ``by`` is "binary" or "family". Families with fewer than 2 members cannot
    be stratified and are dropped with a warning.
    """
    labels = dataset.y_binary if by == "binary" else dataset.y_family
    if labels is None:
        raise ConfigError("family stratification requested but no family labels")
    split, keep = stratified_assignment(labels, train_fraction, seed,
                                        drop_singletons=(by == "family"))
    if not keep.all():
        sel = np.flatnonzero(keep)
        dataset = LabeledDataset(
            [dataset.ids[i] for i in sel],
            dataset.X[sel],
            dataset.y_binary[sel],
            dataset.y_family[sel] if dataset.y_family is not None else None,
            dataset.family_name_map,
        )
        split = split[sel]
    dataset.split = split.astype(str)
    return dataset


def filter_top_n_families(dataset: LabeledDataset, n: int = 200) -> LabeledDataset:
    """Keep rows of the n most frequent families, re-indexed densely.

    Re-encoding follows frequency rank (ties lexicographic by family name),
    so index 0 is always the most common retained family.
    """
    if dataset.y_family is None:
        raise ConfigError("dataset has no family labels")
    valid = dataset.y_family >= 0
    counts = Counter(dataset.y_family[valid].tolist())
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], dataset.family_name_map[kv[0]]))
    if len(ranked) < n:
        warnings.warn(f"only {len(ranked)} distinct families; keeping all")
    kept = [old for old, _ in ranked[:n]]
    remap = {old: new for new, old in enumerate(kept)}
    mask = np.array([f in remap for f in dataset.y_family], dtype=bool)
    sel = np.flatnonzero(mask)
    return LabeledDataset(
        [dataset.ids[i] for i in sel],
        dataset.X[sel],
        dataset.y_binary[sel],
        np.array([remap[f] for f in dataset.y_family[sel]], dtype=np.int64),
        {remap[old]: dataset.family_name_map[old] for old in kept},
        dataset.split[sel] if dataset.split is not None else None,
    )


def compute_class_weights(y: np.ndarray) -> np.ndarray:
    """Inverse-frequency weights: weight[c] = N / (n_classes * count[c])."""
    counts = np.bincount(y)
    if np.any(counts == 0):
        raise ValueError("class indices must be dense (no empty classes)")
    return y.size / (counts.size * counts.astype(np.float64))


# ---------------------------------------------------------------------------
# dataset bundle IO


def _fmt(v: float) -> str:
    return np.format_float_positional(v, trim="0")


def save_dataset_bundle(out_dir, dataset: LabeledDataset, layout: LayoutConfig,
                        vocabularies: dict, stats: NormStats, seed: int) -> None:
    """Write the bundle: dataset.json manifest plus a flat data.csv matrix."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "layout_config": layout.to_json(),
        "vocabularies": {
            name: sorted(v.token_to_index, key=v.token_to_index.get)
            for name, v in vocabularies.items()
        },
        "norm_stats": {
            "mean": [ _fmt(v) for v in stats.mean ],
            "std": [ _fmt(v) for v in stats.std ],
            "epsilon": stats.epsilon,
        },
        "seed": seed,
        "counts": {
            "rows": len(dataset),
            "train": int((dataset.split == "train").sum()) if dataset.split is not None else None,
            "test": int((dataset.split == "test").sum()) if dataset.split is not None else None,
            "dim": int(dataset.X.shape[1]),
        },
        "family_name_map": {str(k): v for k, v in dataset.family_name_map.items()},
    }
    (out_dir / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    with open(out_dir / "data.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "family", "split"] + [f"f{j}" for j in range(dataset.X.shape[1])])
        for i in range(len(dataset)):
            fam = ""
            if dataset.y_family is not None and dataset.y_family[i] >= 0:
                fam = dataset.family_name_map[int(dataset.y_family[i])]
            writer.writerow(
                [dataset.ids[i], int(dataset.y_binary[i]), fam,
                 dataset.split[i] if dataset.split is not None else ""]
                + [_fmt(v) for v in dataset.X[i]]
            )


def load_dataset_bundle(in_dir):
    """Read back a bundle written by save_dataset_bundle.

    Returns (dataset, layout, vocabularies, stats, seed).
    """
    in_dir = Path(in_dir)
    manifest = json.loads((in_dir / "dataset.json").read_text())
    layout = LayoutConfig.from_json(manifest["layout_config"])
    vocabularies = {
        name: Vocabulary(name, {tok: i for i, tok in enumerate(tokens)},
                         getattr(layout, {"imports": "imports_cap",
                                          "exports": "exports_cap",
                                          "section_properties": "sections_cap"}[name]))
        for name, tokens in manifest["vocabularies"].items()
    }
    ns = manifest["norm_stats"]
    stats = NormStats(
        np.array([float(v) for v in ns["mean"]]),
        np.array([float(v) for v in ns["std"]]),
        ns["epsilon"],
    )
    ids, labels, fams, splits, rows = [], [], [], [], []
    with open(in_dir / "data.csv", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            ids.append(row[0])
            labels.append(int(row[1]))
            fams.append(row[2] or None)
            splits.append(row[3])
            rows.append([float(v) for v in row[4:]])
    X = np.asarray(rows, dtype=np.float64)
    name_map = {int(k): v for k, v in manifest["family_name_map"].items()}
    y_family = None
    if name_map:
        index_of = {v: k for k, v in name_map.items()}
        y_family = np.array([index_of.get(f, -1) for f in fams], dtype=np.int64)
    dataset = LabeledDataset(ids, X, np.asarray(labels, dtype=np.int64),
                             y_family, name_map, np.asarray(splits, dtype=str))
    return dataset, layout, vocabularies, stats, manifest["seed"]
