import pytest

from metamorph.data import SynthShapes
from metamorph.inr import INRConfig
from metamorph.prior import smooth

from test_prior import random_bn_network

TINY_INR = INRConfig(depth=3, width=16, num_frequencies=4)


@pytest.fixture(scope="session")
def smoothed_prior():
    net, _ = smooth(random_bn_network(21))
    return net


@pytest.fixture(scope="session")
def tiny_data():
    return SynthShapes(seed=1, train_count=64, test_count=32).split("train")
