"""Command-line entry point.

Subcommands chain through step directories: synth -> preprocess -> train ->
embed -> eval-knn / eval-cluster / eval-classify -> report. Every step
leaves a manifest.json; downstream steps verify upstream config hashes and
refuse to run on mismatch unless --force is given.

Exit code 0 on success; on failure a machine-readable JSON error is printed
to stderr and the exit code is nonzero.
"""

import argparse
import json
import sys

from . import harness
from .synth import SyntheticCorpusSpec


def _parse_k_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _load_config(path):
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def build_parser():
    p = argparse.ArgumentParser(prog="malsim")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic EMBER-shaped corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--config", help="JSON file of corpus spec overrides")
    sp.add_argument("--families", type=int, default=4)
    sp.add_argument("--per-family", type=int, default=50)
    sp.add_argument("--overlap", type=float, default=0.0)
    sp.add_argument("--duplicate-rate", type=float, default=0.0)
    sp.add_argument("--malformed-rate", type=float, default=0.0)
    sp.add_argument("--seed", type=int, default=42)

    sp = sub.add_parser("preprocess", help="parse, vectorize, normalize and split a corpus")
    sp.add_argument("--in", dest="input", required=True, help="JSONL corpus path")
    sp.add_argument("--out", required=True)
    sp.add_argument("--config", help="JSON file of layout size overrides")
    sp.add_argument("--vocab-cap", type=int, default=2048)
    sp.add_argument("--train-fraction", type=float, default=0.8)
    sp.add_argument("--stratify-by", choices=["binary", "family"], default="binary")
    sp.add_argument("--binarize-bow", action="store_true")
    sp.add_argument("--seed", type=int, default=42)
    sp.add_argument("--force", action="store_true")

    sp = sub.add_parser("train", help="train one embedding extractor")
    sp.add_argument("--data", required=True, help="preprocess output directory")
    sp.add_argument("--out", required=True)
    sp.add_argument("--model", required=True,
                    choices=["ae", "mlp_binary", "mlp_family", "gbdt_binary", "gbdt_family"])
    sp.add_argument("--config", help="JSON file of trainer params")
    sp.add_argument("--with-family-feature", action="store_true")
    sp.add_argument("--top-n-families", type=int, default=200)
    sp.add_argument("--seed", type=int, default=42)
    sp.add_argument("--force", action="store_true")

    sp = sub.add_parser("embed", help="extract embeddings for a data split")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--model-dir", help="train output directory; omit for raw features")
    sp.add_argument("--split", choices=["train", "test", "all"], default="test")
    sp.add_argument("--class-scope", type=int,
                    help="restrict a softmax GBDT leaf vector to one class's trees")
    sp.add_argument("--force", action="store_true")

    sp = sub.add_parser("eval-knn", help="Label-Homogeneity@K over an embedding set")
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--metric", choices=["euclidean", "leaf-overlap"])
    sp.add_argument("--k", type=_parse_k_list, default=[1, 10, 50, 100])
    sp.add_argument("--label-field", choices=["binary", "family"], default="binary")
    sp.add_argument("--sample", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--force", action="store_true")

    sp = sub.add_parser("eval-cluster", help="clustering validity metrics")
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--labels", choices=["binary", "family"], default="binary")
    sp.add_argument("--sample", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--force", action="store_true")

    sp = sub.add_parser("eval-classify", help="held-out classification metrics")
    sp.add_argument("--model-dir", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--top-k", type=int, default=5)
    sp.add_argument("--force", action="store_true")

    sp = sub.add_parser("report", help="merge step reports into combined tables")
    sp.add_argument("--in", dest="input", required=True, help="experiment root directory")
    sp.add_argument("--out", required=True)
    return p


def run(args) -> dict:
    if args.command == "synth":
        overrides = _load_config(args.config)
        spec = SyntheticCorpusSpec(**{
            "n_families": args.families,
            "samples_per_family": args.per_family,
            "overlap": args.overlap,
            "duplicate_rate": args.duplicate_rate,
            "malformed_rate": args.malformed_rate,
            "seed": args.seed,
            **overrides,
        })
        return harness.step_synth(spec, args.out)
    if args.command == "preprocess":
        cfg = _load_config(args.config)
        return harness.step_preprocess(
            args.input, args.out, vocab_cap=args.vocab_cap,
            train_fraction=args.train_fraction, seed=args.seed,
            stratify_by=args.stratify_by, binarize_bow=args.binarize_bow,
            layout_sizes=cfg.get("layout_sizes"), force=args.force)
    if args.command == "train":
        return harness.step_train(
            args.data, args.model, args.out, seed=args.seed,
            params=_load_config(args.config),
            with_family_feature=args.with_family_feature,
            top_n_families=args.top_n_families, force=args.force)
    if args.command == "embed":
        return harness.step_embed(
            args.data, args.out, model_dir=args.model_dir, split=args.split,
            class_scope=args.class_scope, force=args.force)
    if args.command == "eval-knn":
        return harness.step_eval_knn(
            args.embeddings, args.out, metric=args.metric, k_list=args.k,
            label_field=args.label_field, sample=args.sample, seed=args.seed,
            force=args.force)
    if args.command == "eval-cluster":
        return harness.step_eval_cluster(
            args.embeddings, args.out, labels=args.labels, sample=args.sample,
            seed=args.seed, force=args.force)
    if args.command == "eval-classify":
        return harness.step_eval_classify(
            args.model_dir, args.data, args.out, top_k=args.top_k, force=args.force)
    if args.command == "report":
        return harness.step_report(args.input, args.out)
    raise ValueError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        manifest = run(args)
    except Exception as exc:  # CLI boundary: report anything as structured JSON
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    print(json.dumps({"step": manifest["step"], "config_hash": manifest["config_hash"]}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
