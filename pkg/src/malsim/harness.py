"""Experiment steps, manifests and report emission.

Each step writes its outputs plus a manifest.json recording the step name,
the full config, a sha256 of that config, references to upstream step
directories (with their config hashes), the seeds used, and the package
version. A downstream step re-hashes each upstream manifest's config and
refuses to run on mismatch unless forced, so any emitted table can be traced
to the exact inputs that produced it.
"""

import hashlib
import json
from pathlib import Path

import numpy as np

from . import __version__
from . import eval_metrics, feature_pipeline as fp, gbdt, neural, similarity_index as sim
from .synth import SyntheticCorpusSpec, generate_corpus


class ChainError(Exception):
    pass


MODEL_NAMES = ("ae", "mlp_binary", "mlp_family", "gbdt_binary", "gbdt_family", "raw")


def _config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def write_manifest(out_dir, step: str, config: dict, upstream: dict | None = None,
                   outputs: dict | None = None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "step": step,
        "config": config,
        "config_hash": _config_hash(config),
        "upstream": upstream or {},
        "outputs": outputs or {},
        "version": __version__,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read_manifest(step_dir) -> dict:
    path = Path(step_dir) / "manifest.json"
    if not path.exists():
        raise ChainError(f"missing prerequisite artifact: {path}")
    return json.loads(path.read_text())


def check_upstream(step_dir, force: bool = False) -> dict:
    """Verify a consumed step dir's config still hashes to its recorded value."""
    manifest = read_manifest(step_dir)
    actual = _config_hash(manifest["config"])
    if actual != manifest["config_hash"] and not force:
        raise ChainError(
            f"config hash mismatch in {step_dir} (expected {manifest['config_hash']},"
            f" got {actual}); rerun the step or pass --force"
        )
    return manifest


def _upstream_ref(step_dir, manifest) -> dict:
    return {"path": str(step_dir), "config_hash": manifest["config_hash"]}


# ---------------------------------------------------------------------------
# steps


def step_synth(spec: SyntheticCorpusSpec, out_dir) -> dict:
    summary = generate_corpus(spec, out_dir)
    return write_manifest(out_dir, "synth", summary["spec"],
                          outputs={"corpus": "corpus.jsonl", "truth": "truth.csv",
                                   "records": summary["records"]})


def step_preprocess(corpus_path, out_dir, vocab_cap: int = 2048,
                    train_fraction: float = 0.8, seed: int = 42,
                    stratify_by: str = "binary", binarize_bow: bool = False,
                    layout_sizes: dict | None = None, force: bool = False) -> dict:
    corpus_path = Path(corpus_path)
    upstream = {}
    if (corpus_path.parent / "manifest.json").exists():
        upstream["synth"] = _upstream_ref(corpus_path.parent,
                                          check_upstream(corpus_path.parent, force))
    with open(corpus_path) as fh:
        records, skipped = fp.parse_records(fh)
    records = fp.clean_and_dedup(records)
    labeled = [r for r in records if r.label is not None]
    if stratify_by == "family":
        fams = sorted({r.avclass for r in labeled if r.avclass})
        fam_idx = {f: i for i, f in enumerate(fams)}
        strat_labels = np.array([fam_idx.get(r.avclass, -1) for r in labeled])
    else:
        strat_labels = np.array([r.label for r in labeled])
    split, keep = fp.stratified_assignment(strat_labels, train_fraction, seed,
                                           drop_singletons=(stratify_by == "family"))
    labeled = [r for r, k in zip(labeled, keep) if k]
    split = split[keep]
    train_records = [r for r, s in zip(labeled, split) if s == "train"]

    sizes = layout_sizes or {}
    header_fields = tuple(sorted({k for r in train_records for k in r.header_fields}))
    layout = fp.LayoutConfig(
        histogram_size=sizes.get("histogram", 256),
        byteentropy_size=sizes.get("byteentropy", 256),
        printabledist_size=sizes.get("printabledist", 96),
        imports_cap=vocab_cap, exports_cap=vocab_cap, sections_cap=vocab_cap,
        header_fields=header_fields, binarize_bow=binarize_bow,
    )
    vocabs = {f: fp.build_vocabulary(train_records, f, vocab_cap) for f in fp.BOW_FIELDS}
    dataset = fp.assemble_dataset(labeled, vocabs, layout, split=split)
    stats = fp.fit_normalizer(dataset.X[dataset.rows("train")])
    fp.save_dataset_bundle(out_dir, dataset, layout, vocabs, stats, seed)
    config = {
        "corpus": str(corpus_path), "vocab_cap": vocab_cap,
        "train_fraction": train_fraction, "seed": seed,
        "stratify_by": stratify_by, "binarize_bow": binarize_bow,
        "layout": layout.to_json(),
    }
    return write_manifest(out_dir, "preprocess", config, upstream,
                          outputs={"rows": len(dataset), "skipped_lines": skipped,
                                   "dim": int(dataset.X.shape[1])})


def _load_bundle(dataset_dir, force):
    manifest = check_upstream(dataset_dir, force)
    dataset, layout, vocabs, stats, seed = fp.load_dataset_bundle(dataset_dir)
    return manifest, dataset, stats


def _family_task(dataset, top_n):
    filtered = fp.filter_top_n_families(dataset, top_n)
    return filtered


def step_train(dataset_dir, model_name: str, out_dir, seed: int = 42,
               params: dict | None = None, with_family_feature: bool = False,
               top_n_families: int = 200, force: bool = False) -> dict:
    if model_name not in MODEL_NAMES or model_name == "raw":
        raise ValueError(f"unknown trainable model {model_name!r}")
    params = dict(params or {})
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    up_manifest, dataset, stats = _load_bundle(dataset_dir, force)
    Xz = fp.apply_normalizer(stats, dataset.X)
    meta = {"model_name": model_name, "with_family_feature": with_family_feature,
            "seed": seed, "params": params}

    if model_name == "ae":
        cfg = neural.TrainConfig(seed=seed, loss="mse",
                                 batch_size=params.get("batch_size", 256),
                                 max_epochs=params.get("epochs", 30))
        tr = dataset.rows("train")
        pair, losses = neural.train_autoencoder(Xz[tr], cfg,
                                                fraction=params.get("fraction", 0.25))
        neural.save_model(pair.encoder, out_dir / "encoder")
        neural.save_model(pair.decoder, out_dir / "decoder")
        meta["loss_history"] = losses
    elif model_name in ("mlp_binary", "mlp_family"):
        if model_name == "mlp_family":
            dataset = _family_task(dataset, top_n_families)
            Xz = fp.apply_normalizer(stats, dataset.X)
            weights = fp.compute_class_weights(dataset.y_family[dataset.rows("train")])
            cfg = neural.TrainConfig(seed=seed, loss="categorical_ce",
                                     class_weights=weights,
                                     batch_size=params.get("batch_size", 256),
                                     max_epochs=params.get("epochs", 50),
                                     patience=params.get("patience", 5))
            tr = dataset.rows("train")
            model, history = neural.train_classifier(
                Xz[tr], dataset.y_family[tr], cfg,
                n_classes=len(dataset.family_name_map))
            meta["n_classes"] = len(dataset.family_name_map)
            meta["families"] = [dataset.family_name_map[i]
                                for i in range(len(dataset.family_name_map))]
        else:
            cfg = neural.TrainConfig(seed=seed, loss="bce",
                                     batch_size=params.get("batch_size", 256),
                                     max_epochs=params.get("epochs", 50),
                                     patience=params.get("patience", 5))
            tr = dataset.rows("train")
            model, history = neural.train_classifier(Xz[tr], dataset.y_binary[tr], cfg)
        neural.save_model(model, out_dir / "net")
        meta["history"] = history.epochs
    elif model_name in ("gbdt_binary", "gbdt_family"):
        hp = gbdt.Hyperparams(
            max_depth=params.get("max_depth", 6),
            learning_rate=params.get("learning_rate", 0.1),
        )
        rounds = params.get("rounds", 100)
        if model_name == "gbdt_family":
            dataset = _family_task(dataset, top_n_families)
            Xz = fp.apply_normalizer(stats, dataset.X)
            tr = dataset.rows("train")
            Xtr, ytr = Xz[tr], dataset.y_family[tr]
            objective = "softmax"
            meta["n_classes"] = len(dataset.family_name_map)
            meta["families"] = [dataset.family_name_map[i]
                                for i in range(len(dataset.family_name_map))]
        else:
            tr = dataset.rows("train")
            Xtr, ytr = Xz[tr], dataset.y_binary[tr]
            objective = "logistic"
            if with_family_feature:
                Xtr = np.column_stack([Xtr, dataset.y_family[tr].astype(np.float64)])
        if params.get("grid_search"):
            grid = {"max_depth": params.get("grid_max_depth", [4, 6, 8]),
                    "learning_rate": params.get("grid_learning_rate", [0.05, 0.1, 0.3]),
                    "rounds": [rounds]}
            best = gbdt.grid_search_cv(Xtr, ytr, grid,
                                       folds=params.get("folds", 3),
                                       seed=seed, objective=objective)
            hp = gbdt.Hyperparams(max_depth=best["max_depth"],
                                  learning_rate=best["learning_rate"])
            meta["grid_search"] = best
        model = gbdt.train_gbdt(Xtr, ytr, objective, hp, rounds=rounds)
        (out_dir / "model.json").write_text(gbdt.model_to_json(model))

    (out_dir / "model_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    config = {"dataset": str(dataset_dir), "model": model_name, "seed": seed,
              "params": params, "with_family_feature": with_family_feature,
              "top_n_families": top_n_families}
    return write_manifest(out_dir, "train", config,
                          {"preprocess": _upstream_ref(dataset_dir, up_manifest)})


def _embedding_rows(dataset, split):
    if split == "all":
        return np.arange(len(dataset))
    return dataset.rows(split)


def step_embed(dataset_dir, out_dir, model_dir=None, split: str = "test",
               class_scope: int | None = None, force: bool = False) -> dict:
    up_manifest, dataset, stats = _load_bundle(dataset_dir, force)
    upstream = {"preprocess": _upstream_ref(dataset_dir, up_manifest)}
    if model_dir is None:
        meta = {"model_name": "raw"}
    else:
        model_dir = Path(model_dir)
        upstream["train"] = _upstream_ref(model_dir, check_upstream(model_dir, force))
        meta = json.loads((model_dir / "model_meta.json").read_text())
    name = meta["model_name"]

    if name in ("mlp_family", "gbdt_family"):
        if dataset.y_family is None:
            raise ValueError("family model requires family labels in the dataset")
        keep_names = set(meta["families"])
        name_of = dataset.family_name_map
        mask = np.array([f >= 0 and name_of[f] in keep_names for f in dataset.y_family])
        sel_all = np.flatnonzero(mask)
        remap = {fam: i for i, fam in enumerate(meta["families"])}
        dataset = fp.LabeledDataset(
            [dataset.ids[i] for i in sel_all], dataset.X[sel_all],
            dataset.y_binary[sel_all],
            np.array([remap[name_of[f]] for f in dataset.y_family[sel_all]], dtype=np.int64),
            {i: fam for i, fam in enumerate(meta["families"])},
            dataset.split[sel_all])
    rows = _embedding_rows(dataset, split)
    Xz = fp.apply_normalizer(stats, dataset.X[rows])
    kind = "continuous"
    if name == "raw":
        vectors, source = Xz, "raw_features"
    elif name == "ae":
        encoder = neural.load_model(Path(model_dir) / "encoder")
        vectors, source = neural.extract_embedding(encoder, Xz), "ae"
    elif name in ("mlp_binary", "mlp_family"):
        net = neural.load_model(Path(model_dir) / "net")
        vectors, source = neural.extract_embedding(net, Xz), name
    elif name in ("gbdt_binary", "gbdt_family"):
        model = gbdt.model_from_json((Path(model_dir) / "model.json").read_text())
        Xin = Xz
        if meta.get("with_family_feature"):
            Xin = np.column_stack([Xz, dataset.y_family[rows].astype(np.float64)])
            source = "gbdt_binary_famfeat"
        else:
            source = name
        vectors = gbdt.leaf_embedding(model, Xin, class_index=class_scope)
        kind = "leaf_index"
    else:
        raise ValueError(f"cannot embed with model {name!r}")

    emb = sim.EmbeddingSet(
        [dataset.ids[i] for i in rows], np.asarray(vectors),
        dataset.y_binary[rows],
        dataset.y_family[rows] if dataset.y_family is not None else None,
        kind, source)
    metric_default = "leaf-overlap" if kind == "leaf_index" else "euclidean"
    sim.save_embedding_set(out_dir, emb, metric_default)
    config = {"dataset": str(dataset_dir),
              "model_dir": str(model_dir) if model_dir else None,
              "split": split, "class_scope": class_scope, "source": source}
    return write_manifest(out_dir, "embed", config, upstream,
                          outputs={"n": len(emb), "d": int(emb.vectors.shape[1]),
                                   "kind": kind})


def step_eval_knn(emb_dir, out_dir, metric: str | None = None,
                  k_list=(1, 10, 50, 100), label_field: str = "binary",
                  sample: int | None = None, seed: int = 0,
                  force: bool = False) -> dict:
    up = check_upstream(emb_dir, force)
    emb = sim.load_embedding_set(emb_dir)
    if metric is None:
        metric = "leaf-overlap" if emb.kind == "leaf_index" else "euclidean"
    index = sim.build_index(emb, metric)
    k_list = [k for k in k_list if k < len(emb)]
    report = sim.label_homogeneity_at_k(index, k_list, label_field, sample, seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(
        json.dumps({"type": "label_homogeneity", **report.to_json()},
                   indent=2, sort_keys=True))
    _write_csv(out_dir / "report.csv",
               [["# label_homogeneity", report.source, report.metric]]
               + report.to_csv_rows())
    config = {"embeddings": str(emb_dir), "metric": metric, "k_list": list(k_list),
              "label_field": label_field, "sample": sample, "seed": seed}
    return write_manifest(out_dir, "eval_knn", config,
                          {"embed": _upstream_ref(emb_dir, up)})


def step_eval_cluster(emb_dir, out_dir, labels: str = "binary",
                      sample: int | None = None, seed: int = 0,
                      force: bool = False) -> dict:
    up = check_upstream(emb_dir, force)
    emb = sim.load_embedding_set(emb_dir)
    if labels == "binary":
        y = emb.labels_binary
    else:
        if emb.labels_family is None:
            raise ValueError("embedding set has no family labels")
        y = emb.labels_family
    X = emb.vectors.astype(np.float64)
    if sample is not None and sample < X.shape[0]:
        idx = np.sort(np.random.default_rng(seed).choice(X.shape[0], sample, replace=False))
        X, y = X[idx], y[idx]
    report = eval_metrics.cluster_metrics_report(X, y)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"type": "cluster_metrics", "source": emb.source, "labels": labels,
           **report.to_json()}
    (out_dir / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    _write_csv(out_dir / "report.csv",
               [["# clustering_metrics", emb.source, labels],
                ["silhouette", "calinski_harabasz", "davies_bouldin", "n", "k"],
                [report.silhouette,
                 "inf" if report.ch_infinite else report.calinski_harabasz,
                 report.davies_bouldin, report.n, report.k]])
    config = {"embeddings": str(emb_dir), "labels": labels, "sample": sample, "seed": seed}
    return write_manifest(out_dir, "eval_cluster", config,
                          {"embed": _upstream_ref(emb_dir, up)})


def step_eval_classify(model_dir, dataset_dir, out_dir, top_k: int = 5,
                       force: bool = False) -> dict:
    up_data, dataset, stats = _load_bundle(dataset_dir, force)
    model_dir = Path(model_dir)
    up_model = check_upstream(model_dir, force)
    meta = json.loads((model_dir / "model_meta.json").read_text())
    name = meta["model_name"]
    if name == "ae":
        raise ValueError("autoencoder has no classification head")
    family = name in ("mlp_family", "gbdt_family")
    if family:
        keep = set(meta["families"])
        remap = {fam: i for i, fam in enumerate(meta["families"])}
        mask = np.array([f >= 0 and dataset.family_name_map[f] in keep
                         for f in dataset.y_family])
        sel = np.flatnonzero(mask & (dataset.split == "test"))
        y_true = np.array([remap[dataset.family_name_map[f]]
                           for f in dataset.y_family[sel]], dtype=np.int64)
    else:
        sel = dataset.rows("test")
        y_true = dataset.y_binary[sel]
    Xz = fp.apply_normalizer(stats, dataset.X[sel])
    if name.startswith("mlp"):
        net = neural.load_model(model_dir / "net")
        out = net.forward(Xz, train=False)
        scores = out[:, 0] if not family else out
    else:
        model = gbdt.model_from_json((model_dir / "model.json").read_text())
        Xin = Xz
        if meta.get("with_family_feature"):
            Xin = np.column_stack([Xz, dataset.y_family[sel].astype(np.float64)])
        scores = gbdt.predict_proba(model, Xin)
    if family:
        y_pred = scores.argmax(axis=1)
        report = eval_metrics.classification_report(y_true, y_pred, scores, top_k=top_k)
    else:
        flat = scores if scores.ndim == 1 else scores[:, 0]
        y_pred = (flat >= 0.5).astype(np.int64)
        report = eval_metrics.classification_report(y_true, y_pred, flat)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"type": "classification", "source": name, **report.to_json()}
    (out_dir / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    rows = [["# classification_metrics", name],
            ["accuracy", report.accuracy],
            ["macro_precision", report.macro["precision"]],
            ["macro_recall", report.macro["recall"]],
            ["macro_f1", report.macro["f1"]],
            ["weighted_precision", report.weighted["precision"]],
            ["weighted_recall", report.weighted["recall"]],
            ["weighted_f1", report.weighted["f1"]]]
    if report.roc_auc is not None:
        rows.append(["roc_auc", report.roc_auc])
    if report.roc_auc_ovr_macro is not None:
        rows.append(["roc_auc_ovr_macro", report.roc_auc_ovr_macro])
        rows.append(["roc_auc_ovr_weighted", report.roc_auc_ovr_weighted])
    if report.top_k_accuracy is not None:
        rows.append([f"top_{report.top_k}_accuracy", report.top_k_accuracy])
    _write_csv(out_dir / "report.csv", rows)
    config = {"model_dir": str(model_dir), "dataset": str(dataset_dir), "top_k": top_k}
    return write_manifest(out_dir, "eval_classify", config,
                          {"train": _upstream_ref(model_dir, up_model),
                           "preprocess": _upstream_ref(dataset_dir, up_data)})


# ---------------------------------------------------------------------------
# report merging


def _write_csv(path, rows):
    import csv

    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)


def step_report(experiment_root, out_dir) -> dict:
    """Merge every step report under experiment_root into combined tables.

    Emits merged.json plus one CSV per report family and a Markdown summary.
    Pure function of the input files: rerunning on unchanged inputs is
    byte-identical.
    """
    root = Path(experiment_root)
    reports = []
    for path in sorted(root.rglob("report.json")):
        doc = json.loads(path.read_text())
        doc["_dir"] = str(path.parent.relative_to(root))
        reports.append(doc)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "merged.json").write_text(json.dumps(reports, indent=2, sort_keys=True))

    homog = [r for r in reports if r["type"] == "label_homogeneity"]
    clusters = [r for r in reports if r["type"] == "cluster_metrics"]
    classif = [r for r in reports if r["type"] == "classification"]

    rows = [["source", "metric", "K", "benign_mean", "benign_std",
             "malicious_mean", "malicious_std", "all_mean", "all_std"]]
    for r in homog:
        for k in sorted(r["per_k"], key=int):
            g = r["per_k"][k]
            rows.append([r["source"], r["metric"], k,
                         g["benign"]["mean"], g["benign"]["std"],
                         g["malicious"]["mean"], g["malicious"]["std"],
                         g["all"]["mean"], g["all"]["std"]])
    _write_csv(out_dir / "label_homogeneity.csv", rows)

    rows = [["source", "labels", "silhouette", "calinski_harabasz", "davies_bouldin", "n", "k"]]
    for r in clusters:
        rows.append([r["source"], r["labels"], r["silhouette"],
                     r["calinski_harabasz"], r["davies_bouldin"], r["n"], r["k"]])
    _write_csv(out_dir / "clustering_metrics.csv", rows)

    rows = [["source", "accuracy", "macro_precision", "macro_recall", "macro_f1",
             "weighted_precision", "weighted_recall", "weighted_f1",
             "roc_auc", "roc_auc_ovr_macro", "roc_auc_ovr_weighted", "top_k_accuracy"]]
    for r in classif:
        rows.append([r["source"], r["accuracy"],
                     r["macro"]["precision"], r["macro"]["recall"], r["macro"]["f1"],
                     r["weighted"]["precision"], r["weighted"]["recall"], r["weighted"]["f1"],
                     r.get("roc_auc", ""), r.get("roc_auc_ovr_macro", ""),
                     r.get("roc_auc_ovr_weighted", ""), r.get("top_k_accuracy", "")])
    _write_csv(out_dir / "classification_metrics.csv", rows)

    md = ["# Experiment report", ""]
    if classif:
        md += ["## Classification", "",
               "| source | accuracy | macro F1 | weighted F1 |", "| --- | --- | --- | --- |"]
        md += [f"| {r['source']} | {r['accuracy']:.4f} | {r['macro']['f1']:.4f} |"
               f" {r['weighted']['f1']:.4f} |" for r in classif]
        md.append("")
    if clusters:
        md += ["## Clustering metrics", "",
               "| source | labels | silhouette | CH | DB |", "| --- | --- | --- | --- | --- |"]
        for r in clusters:
            ch = r["calinski_harabasz"]
            ch = ch if isinstance(ch, str) else f"{ch:.4f}"
            md.append(f"| {r['source']} | {r['labels']} | {r['silhouette']:.4f} |"
                      f" {ch} | {r['davies_bouldin']:.4f} |")
        md.append("")
    if homog:
        md += ["## Label homogeneity", "",
               "| source | metric | K | all mean | all std |", "| --- | --- | --- | --- | --- |"]
        for r in homog:
            for k in sorted(r["per_k"], key=int):
                g = r["per_k"][k]["all"]
                md.append(f"| {r['source']} | {r['metric']} | {k} |"
                          f" {g['mean']:.4f} | {g['std']:.4f} |")
        md.append("")
    (out_dir / "report.md").write_text("\n".join(md))

    config = {"experiment_root": str(root), "n_reports": len(reports)}
    return write_manifest(out_dir, "report", config)
