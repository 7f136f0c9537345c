import pytest

from gensemcom.pipeline import DatasetOracle, samples_from_scenes
from gensemcom.synthetic import make_dataset


@pytest.fixture(scope="session")
def small_samples():
    return samples_from_scenes(make_dataset(4, seed=0))


@pytest.fixture(scope="session")
def small_oracle(small_samples):
    return DatasetOracle(small_samples)
