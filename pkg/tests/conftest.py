"""Shared fixtures: a small synthetic dataset and a trained semantic index.

Session-scoped because MSAC training is the slow part; individual tests must
not mutate these objects.
"""

import numpy as np
import pytest

from esans.data import SyntheticSpec, generate_synthetic
from esans.msac import MsacConfig, build_semantic_index, train_msac


@pytest.fixture(scope="session")
def small_dataset():
    spec = SyntheticSpec(
        num_users=60,
        num_items=200,
        num_groups=8,
        modal_dims=(12, 12, 12),
        intra_group_noise=0.1,
        interactions_per_user=8,
        seed=7,
    )
    return generate_synthetic(spec)


@pytest.fixture(scope="session")
def small_msac_config():
    # k_secondary > num_groups so residual clustering splits within groups,
    # which is what makes hard negatives non-empty
    return MsacConfig(
        d_m=16,
        k_primary=8,
        k_secondary=20,
        epochs=2,
        batch_size=64,
        kmeans_restarts=5,
        seed=7,
    )


@pytest.fixture(scope="session")
def small_msac(small_dataset, small_msac_config):
    ds = small_dataset
    return train_msac(ds.image, ds.text, ds.behavior, small_msac_config)


@pytest.fixture(scope="session")
def small_index(small_msac, small_dataset):
    ds = small_dataset
    return build_semantic_index(small_msac, ds.image, ds.text, ds.behavior)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
