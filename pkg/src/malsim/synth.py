"""Synthetic EMBER-shaped corpus generation.

Desk-scale stand-in for the real 1M-sample corpus: per-family Gaussian
centers for the numeric distribution blocks, per-family token pools for the
BoW fields, and configurable overlap between families. overlap=0 gives
families with disjoint token pools and tight numeric clusters (perfectly
separable); larger values blend family centers toward a shared global center
and widen the noise.

Duplicate records and malformed lines are injected at configured rates to
exercise the cleaning pass. Output is deterministic under the seed.
"""

import hashlib
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np


class SynthConfigError(Exception):
    pass


@dataclass
class SyntheticCorpusSpec:
    n_families: int = 4
    samples_per_family: int = 50
    malicious_family_fraction: float = 0.5
    overlap: float = 0.0
    duplicate_rate: float = 0.0
    malformed_rate: float = 0.0
    seed: int = 42
    histogram_size: int = 256
    byteentropy_size: int = 256
    printabledist_size: int = 96
    tokens_per_family: int = 16
    shared_tokens: int = 64
    tokens_per_record: int = 12
    noise_base: float = 0.02
    noise_overlap_gain: float = 0.15

    def __post_init__(self):
        if self.n_families < 1 or self.samples_per_family < 1:
            raise SynthConfigError("need at least one family and one sample per family")
        if not 0.0 <= self.overlap <= 1.0:
            raise SynthConfigError("overlap must be in [0, 1]")


HEADER_FIELDS = (
    "coff.characteristics",
    "coff.timestamp",
    "optional.major_image_version",
    "optional.sizeof_code",
    "optional.sizeof_headers",
    "optional.subsystem",
)

SECTION_PROP_POOL = (
    "CNT_CODE", "CNT_INITIALIZED_DATA", "CNT_UNINITIALIZED_DATA",
    "MEM_EXECUTE", "MEM_READ", "MEM_WRITE", "MEM_DISCARDABLE",
    "ALIGN_4096BYTES",
)


def _family_centers(spec: SyntheticCorpusSpec, rng, size: int) -> np.ndarray:
    global_center = rng.uniform(0.1, 1.0, size=size)
    centers = np.empty((spec.n_families, size))
    for f in range(spec.n_families):
        own = rng.uniform(0.0, 2.0, size=size)
        centers[f] = spec.overlap * global_center + (1.0 - spec.overlap) * own
    return centers


def _token_pools(spec: SyntheticCorpusSpec, rng, prefix: str):
    shared = [f"{prefix}shared{j:03d}" for j in range(spec.shared_tokens)]
    pools = []
    for f in range(spec.n_families):
        pools.append([f"{prefix}fam{f:03d}_{j:03d}" for j in range(spec.tokens_per_family)])
    return shared, pools


def _draw_tokens(spec, rng, shared, pool):
    out = []
    for _ in range(spec.tokens_per_record):
        if shared and rng.random() < spec.overlap:
            out.append(shared[rng.integers(len(shared))])
        else:
            out.append(pool[rng.integers(len(pool))])
    return out


def generate_corpus(spec: SyntheticCorpusSpec, out_dir) -> dict:
    """Write corpus.jsonl and truth.csv under out_dir; return summary counts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    n_mal = int(round(spec.malicious_family_fraction * spec.n_families))
    fam_label = {f: (1 if f < n_mal else 0) for f in range(spec.n_families)}

    hist_c = _family_centers(spec, rng, spec.histogram_size)
    bent_c = _family_centers(spec, rng, spec.byteentropy_size)
    prnt_c = _family_centers(spec, rng, spec.printabledist_size)
    header_c = _family_centers(spec, rng, len(HEADER_FIELDS))
    imp_shared, imp_pools = _token_pools(spec, rng, "fn_")
    exp_shared, exp_pools = _token_pools(spec, rng, "exp")

    sigma = spec.noise_base + spec.noise_overlap_gain * spec.overlap
    lines = []
    truth = []
    serial = 0
    for f in range(spec.n_families):
        fam_name = f"fam{f:03d}"
        props = list(SECTION_PROP_POOL[(f % 4):(f % 4) + 4])
        for _ in range(spec.samples_per_family):
            sha = hashlib.sha256(f"{spec.seed}:{serial}".encode()).hexdigest()
            serial += 1

            def noisy(centers, size):
                vals = centers[f] + sigma * rng.normal(size=size)
                return [round(float(v), 6) for v in np.maximum(vals, 0.0)]

            header_vals = header_c[f] + sigma * rng.normal(size=len(HEADER_FIELDS))
            header = {}
            for name, val in zip(HEADER_FIELDS, header_vals):
                grp, key = name.split(".", 1)
                header.setdefault(grp, {})[key] = round(float(val), 6)
            imports = {"mod.dll": _draw_tokens(spec, rng, imp_shared, imp_pools[f])}
            record = {
                "sha256": sha,
                "label": fam_label[f],
                "avclass": fam_name,
                "histogram": noisy(hist_c, spec.histogram_size),
                "byteentropy": noisy(bent_c, spec.byteentropy_size),
                "strings": {"printabledist": noisy(prnt_c, spec.printabledist_size)},
                "imports": imports,
                "exports": _draw_tokens(spec, rng, exp_shared, exp_pools[f]),
                "section": {"sections": [{"name": ".text", "props": props}]},
                "header": header,
            }
            line = json.dumps(record, sort_keys=True)
            lines.append(line)
            truth.append((sha, fam_label[f], fam_name))
            if rng.random() < spec.duplicate_rate:
                lines.append(line)
            if rng.random() < spec.malformed_rate:
                lines.append('{"broken": [this is not json')

    (out_dir / "corpus.jsonl").write_text("\n".join(lines) + "\n")
    with open(out_dir / "truth.csv", "w") as fh:
        fh.write("sha256,label,family\n")
        for sha, label, fam in truth:
            fh.write(f"{sha},{label},{fam}\n")
    summary = {
        "spec": asdict(spec),
        "records": len(truth),
        "lines": len(lines),
        "families": spec.n_families,
        "header_fields": list(HEADER_FIELDS),
    }
    (out_dir / "synth_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary
