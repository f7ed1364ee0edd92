import numpy as np
import pytest

from nsdarcy import ModelParams, manufactured_problem


@pytest.fixture(scope="session")
def params():
    return ModelParams()


@pytest.fixture(scope="session")
def mms(params):
    return manufactured_problem(params)


@pytest.fixture()
def rng():
    return np.random.default_rng(20260816)
