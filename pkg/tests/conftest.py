import numpy as np
import pytest
import torch

from lipdub.corpus import RenderParams, make_manifest, write_corpus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    """8 identities x 2 clips; enough for contrastive training and splits."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    manifest = make_manifest(root, n_identities=8, clips_per_identity=2, seed=11,
                             render=RenderParams())
    write_corpus(manifest)
    return manifest


@pytest.fixture(scope="session")
def tiny_groups(tiny_manifest):
    from lipdub.corpus import load_split
    return load_split(tiny_manifest, list(range(8)))


@pytest.fixture()
def rng():
    return np.random.default_rng(123)
