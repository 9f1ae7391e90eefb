import numpy as np
import pytest
import torch

from istdkd.synthdata import Dataset, build_dataset


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    torch.manual_seed(0)


def make_dataset(n_train=40, n_test=8, size=64, seed=0):
    samples, split = build_dataset(n_train, n_test, size, seed)
    return Dataset({s.id: s for s in samples}, split)


@pytest.fixture(scope="session")
def small_dataset():
    return make_dataset()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
