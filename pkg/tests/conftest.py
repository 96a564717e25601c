import numpy as np
import pytest

from colodiff.codec import fit_codec
from colodiff.synthdata import generate_dataset


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(40, seed=3)


@pytest.fixture(scope="session")
def small_split(small_dataset):
    return small_dataset.split(0.25, seed=3)


@pytest.fixture(scope="session")
def small_codec(small_dataset, small_split):
    train, _ = small_split
    return fit_codec(small_dataset.videos[train], q=4, channels=4)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
