import numpy as np
import pytest

from dsscnet.harness import preprocess_manifest
from dsscnet.synth import SynthSpec, generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """4 severities x 2 speakers x 4 utterances, preprocessed."""
    root = tmp_path_factory.mktemp("tiny")
    spec = SynthSpec(speakers_per_severity=2, utterances_per_speaker=4, seed=3, corpus_id="tiny")
    manifest, path = generate(spec, root)
    preprocess_manifest(manifest, root / "cache")
    return manifest, path, root / "cache"
