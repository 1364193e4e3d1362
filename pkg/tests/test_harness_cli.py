"""End-to-end step chaining, manifests, CLI contract, determinism."""

import json
from pathlib import Path

import numpy as np
import pytest

from malsim import cli, harness
from malsim import similarity_index as sim


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """A complete small experiment driven through the CLI entry point."""
    root = tmp_path_factory.mktemp("exp")
    gbdt_cfg = root / "gbdt.json"
    gbdt_cfg.write_text(json.dumps({"rounds": 8, "max_depth": 3}))
    mlp_cfg = root / "mlp.json"
    mlp_cfg.write_text(json.dumps({"epochs": 4}))
    ae_cfg = root / "ae.json"
    ae_cfg.write_text(json.dumps({"epochs": 3, "fraction": 1.0}))
    steps = [
        ["synth", "--out", f"{root}/synth", "--families", "2", "--per-family", "40",
         "--overlap", "0.1", "--duplicate-rate", "0.05", "--malformed-rate", "0.05",
         "--seed", "11"],
        ["preprocess", "--in", f"{root}/synth/corpus.jsonl", "--out", f"{root}/data",
         "--vocab-cap", "64", "--seed", "11"],
        ["train", "--data", f"{root}/data", "--out", f"{root}/gbdt", "--model",
         "gbdt_binary", "--config", str(gbdt_cfg), "--seed", "11"],
        ["train", "--data", f"{root}/data", "--out", f"{root}/mlp", "--model",
         "mlp_binary", "--config", str(mlp_cfg), "--seed", "11"],
        ["train", "--data", f"{root}/data", "--out", f"{root}/ae", "--model",
         "ae", "--config", str(ae_cfg), "--seed", "11"],
        ["embed", "--data", f"{root}/data", "--out", f"{root}/emb_raw"],
        ["embed", "--data", f"{root}/data", "--out", f"{root}/emb_gbdt",
         "--model-dir", f"{root}/gbdt"],
        ["embed", "--data", f"{root}/data", "--out", f"{root}/emb_mlp",
         "--model-dir", f"{root}/mlp"],
        ["embed", "--data", f"{root}/data", "--out", f"{root}/emb_ae",
         "--model-dir", f"{root}/ae"],
        ["eval-knn", "--embeddings", f"{root}/emb_raw", "--out", f"{root}/knn_raw",
         "--k", "1,5"],
        ["eval-knn", "--embeddings", f"{root}/emb_gbdt", "--out", f"{root}/knn_gbdt",
         "--k", "1,5"],
        ["eval-cluster", "--embeddings", f"{root}/emb_mlp", "--out", f"{root}/clu_mlp"],
        ["eval-classify", "--model-dir", f"{root}/gbdt", "--data", f"{root}/data",
         "--out", f"{root}/cls_gbdt"],
        ["eval-classify", "--model-dir", f"{root}/mlp", "--data", f"{root}/data",
         "--out", f"{root}/cls_mlp"],
        ["report", "--in", str(root), "--out", f"{root}/report"],
    ]
    for argv in steps:
        assert cli.main(argv) == 0, f"step failed: {argv[0]}"
    return root


def test_chain_emits_all_reports(chain):
    for name in ("merged.json", "label_homogeneity.csv", "clustering_metrics.csv",
                 "classification_metrics.csv", "report.md"):
        assert (chain / "report" / name).exists()
    merged = json.loads((chain / "report" / "merged.json").read_text())
    types = sorted(r["type"] for r in merged)
    assert types == ["classification", "classification", "cluster_metrics",
                     "label_homogeneity", "label_homogeneity"]


def test_manifests_chain_hashes(chain):
    emb = harness.read_manifest(chain / "emb_gbdt")
    train = harness.read_manifest(chain / "gbdt")
    data = harness.read_manifest(chain / "data")
    assert emb["upstream"]["train"]["config_hash"] == train["config_hash"]
    assert emb["upstream"]["preprocess"]["config_hash"] == data["config_hash"]
    assert train["upstream"]["preprocess"]["config_hash"] == data["config_hash"]
    for m in (emb, train, data):
        assert m["config_hash"] == harness._config_hash(m["config"])


def test_rerun_report_byte_identical(chain, tmp_path):
    assert cli.main(["report", "--in", str(chain), "--out", str(tmp_path / "r2")]) == 0
    for name in ("merged.json", "label_homogeneity.csv", "clustering_metrics.csv",
                 "classification_metrics.csv", "report.md"):
        assert (tmp_path / "r2" / name).read_bytes() == \
            (chain / "report" / name).read_bytes()


def test_gbdt_embedding_is_leaf_kind(chain):
    emb = sim.load_embedding_set(chain / "emb_gbdt")
    assert emb.kind == "leaf_index"
    assert emb.vectors.shape[1] == 8  # one column per boosting round
    raw = sim.load_embedding_set(chain / "emb_raw")
    assert raw.kind == "continuous" and raw.source == "raw_features"
    mlp = sim.load_embedding_set(chain / "emb_mlp")
    assert mlp.vectors.shape[1] == 128
    ae = sim.load_embedding_set(chain / "emb_ae")
    assert ae.vectors.shape[1] == 8


def test_kind_mismatch_is_cli_error(chain, tmp_path, capsys):
    rc = cli.main(["eval-knn", "--embeddings", f"{chain}/emb_raw",
                   "--out", str(tmp_path / "bad"), "--metric", "leaf-overlap"])
    assert rc == 1
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "KindMismatchError"


def test_tampered_upstream_refused_without_force(chain, tmp_path, capsys):
    import shutil

    data2 = tmp_path / "data_tampered"
    shutil.copytree(chain / "data", data2)
    manifest = json.loads((data2 / "manifest.json").read_text())
    manifest["config"]["seed"] = 999  # config no longer matches its hash
    (data2 / "manifest.json").write_text(json.dumps(manifest))
    rc = cli.main(["embed", "--data", str(data2), "--out", str(tmp_path / "emb")])
    assert rc == 1
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "ChainError"
    assert cli.main(["embed", "--data", str(data2), "--out", str(tmp_path / "emb"),
                     "--force"]) == 0


def test_missing_prerequisite_names_artifact(tmp_path, capsys):
    rc = cli.main(["embed", "--data", str(tmp_path / "nowhere"),
                   "--out", str(tmp_path / "out")])
    assert rc == 1
    err = json.loads(capsys.readouterr().err.strip())
    assert "manifest.json" in err["message"]


def test_cli_success_prints_machine_readable(chain, tmp_path, capsys):
    rc = cli.main(["report", "--in", str(chain), "--out", str(tmp_path / "r3")])
    assert rc == 0
    out = json.loads(capsys.readouterr().out.strip())
    assert out["step"] == "report" and len(out["config_hash"]) == 64


def test_family_models_and_class_scope(chain, tmp_path):
    root = chain
    cfg = tmp_path / "fam.json"
    cfg.write_text(json.dumps({"rounds": 3, "max_depth": 2}))
    assert cli.main(["train", "--data", f"{root}/data", "--out", str(tmp_path / "gf"),
                     "--model", "gbdt_family", "--config", str(cfg),
                     "--top-n-families", "2", "--seed", "11"]) == 0
    assert cli.main(["embed", "--data", f"{root}/data", "--out", str(tmp_path / "ef"),
                     "--model-dir", str(tmp_path / "gf")]) == 0
    full = sim.load_embedding_set(tmp_path / "ef")
    assert full.vectors.shape[1] == 6  # rounds x classes
    assert cli.main(["embed", "--data", f"{root}/data", "--out", str(tmp_path / "ef0"),
                     "--model-dir", str(tmp_path / "gf"), "--class-scope", "0"]) == 0
    scoped = sim.load_embedding_set(tmp_path / "ef0")
    assert scoped.vectors.shape[1] == 3
    assert cli.main(["eval-classify", "--model-dir", str(tmp_path / "gf"),
                     "--data", f"{root}/data", "--out", str(tmp_path / "cf"),
                     "--top-k", "2"]) == 0
    doc = json.loads((tmp_path / "cf" / "report.json").read_text())
    assert "top_k_accuracy" in doc and doc["top_k"] == 2


def test_with_family_feature_source_tag(chain, tmp_path):
    cfg = tmp_path / "g.json"
    cfg.write_text(json.dumps({"rounds": 3, "max_depth": 2}))
    assert cli.main(["train", "--data", f"{chain}/data", "--out", str(tmp_path / "gff"),
                     "--model", "gbdt_binary", "--with-family-feature",
                     "--config", str(cfg), "--seed", "11"]) == 0
    assert cli.main(["embed", "--data", f"{chain}/data", "--out", str(tmp_path / "eff"),
                     "--model-dir", str(tmp_path / "gff")]) == 0
    emb = sim.load_embedding_set(tmp_path / "eff")
    assert emb.source == "gbdt_binary_famfeat"


def test_preprocess_drops_duplicates_and_malformed(chain):
    synth_summary = json.loads((chain / "synth" / "synth_summary.json").read_text())
    data_manifest = harness.read_manifest(chain / "data")
    assert data_manifest["outputs"]["rows"] == synth_summary["records"]
    assert data_manifest["outputs"]["skipped_lines"] >= 1


def test_full_pipeline_determinism_byte_identical(tmp_path):
    """Acceptance-style check at small scale: two identical runs, identical bytes."""

    def run(base: Path):
        cfg = base / "g.json"
        base.mkdir(parents=True, exist_ok=True)
        cfg.write_text(json.dumps({"rounds": 4, "max_depth": 2}))
        for argv in (
            ["synth", "--out", f"{base}/synth", "--families", "2", "--per-family", "25",
             "--overlap", "0.1", "--seed", "5"],
            ["preprocess", "--in", f"{base}/synth/corpus.jsonl", "--out", f"{base}/data",
             "--vocab-cap", "32", "--seed", "5"],
            ["train", "--data", f"{base}/data", "--out", f"{base}/gbdt",
             "--model", "gbdt_binary", "--config", str(cfg), "--seed", "5"],
            ["embed", "--data", f"{base}/data", "--out", f"{base}/emb",
             "--model-dir", f"{base}/gbdt"],
            ["eval-knn", "--embeddings", f"{base}/emb", "--out", f"{base}/knn",
             "--k", "1,3"],
            ["report", "--in", str(base), "--out", f"{base}/report"],
        ):
            assert cli.main(argv) == 0

    run(tmp_path / "a")
    run(tmp_path / "b")
    for rel in ("synth/corpus.jsonl", "data/data.csv", "data/dataset.json",
                "gbdt/model.json", "emb/embeddings.csv", "knn/report.json",
                "knn/report.csv", "report/merged.json", "report/report.md",
                "report/label_homogeneity.csv"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
