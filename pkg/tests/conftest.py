import pytest

from fedfair.data import SplitSpec, synth_generate
from fedfair.model import ModelSpec


@pytest.fixture
def small_dataset():
    return synth_generate(8, 3, 4, (20, 30), 0.7, seed=3, split=SplitSpec(0.7, 0.1, 0.2))


@pytest.fixture
def small_spec():
    return ModelSpec((4, 6, 3))
