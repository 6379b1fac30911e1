"""Shared fixtures: a session-scoped desk body and synthetic dataset."""

import numpy as np
import pytest

from retexture import bodymodel, dataio


@pytest.fixture(scope="session")
def desk_body():
    return bodymodel.make_desk_body(1)


@pytest.fixture(scope="session")
def synth_dataset(desk_body, tmp_path_factory):
    """Small synthetic dataset shared across tests: 4 identities x 6 views."""
    out = tmp_path_factory.mktemp("synth")
    spec = dataio.SyntheticDatasetSpec(
        n_identities=4, views_per_identity=6, seed=0, texture_dims=(32, 32)
    )
    index, textures = dataio.generate_synthetic_dataset(spec, desk_body, out)
    return index, textures, out


@pytest.fixture(scope="session")
def reid_dataset(desk_body, tmp_path_factory):
    """Acceptance-scale dataset: 8 identities x 16 views with cached operators."""
    out = tmp_path_factory.mktemp("reid")
    spec = dataio.SyntheticDatasetSpec(
        n_identities=8, views_per_identity=16, seed=0, texture_dims=(32, 32)
    )
    index, textures = dataio.generate_synthetic_dataset(spec, desk_body, out)
    index, failures = dataio.precompute_render_tensors(
        index, desk_body, (128, 64), (32, 32), out / "cache", workers=4
    )
    assert not failures
    return index, textures, out


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
