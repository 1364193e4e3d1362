import json

import numpy as np
import pytest

from malsim import feature_pipeline as fp
from malsim.synth import SyntheticCorpusSpec, generate_corpus


@pytest.fixture(scope="session")
def small_corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    spec = SyntheticCorpusSpec(n_families=4, samples_per_family=30, overlap=0.2,
                               duplicate_rate=0.05, malformed_rate=0.05, seed=7)
    generate_corpus(spec, out)
    return out


@pytest.fixture(scope="session")
def small_records(small_corpus_dir):
    with open(small_corpus_dir / "corpus.jsonl") as fh:
        records, skipped = fp.parse_records(fh)
    return fp.clean_and_dedup(records)


def make_record(sha="a" * 64, label=1, avclass="famX", histogram=None,
                byteentropy=None, printabledist=None, imports=None,
                exports=None, section_properties=None, header_fields=None):
    return fp.RawRecord(
        sha256=sha, label=label, avclass=avclass,
        histogram=histogram if histogram is not None else [0.0] * 4,
        byteentropy=byteentropy if byteentropy is not None else [0.0] * 4,
        printabledist=printabledist if printabledist is not None else [0.0] * 2,
        imports=imports or [], exports=exports or [],
        section_properties=section_properties or [],
        header_fields=header_fields or {},
    )


@pytest.fixture
def tiny_layout():
    return fp.LayoutConfig(histogram_size=4, byteentropy_size=4, printabledist_size=2,
                           imports_cap=8, exports_cap=8, sections_cap=8,
                           header_fields=("coff.timestamp", "optional.subsystem"))


def jsonl_line(**kwargs):
    return json.dumps(kwargs, sort_keys=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
