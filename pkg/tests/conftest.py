import numpy as np
import pytest

from ugfem.analysis import bubble_case, sine_case, zero_case
from ugfem.mesh import build_uniform, build_unstructured


@pytest.fixture(scope="session")
def mesh1():
    return build_uniform(1)


@pytest.fixture(scope="session")
def mesh2():
    return build_uniform(2)


@pytest.fixture(scope="session")
def mesh4():
    return build_uniform(4)


@pytest.fixture(scope="session")
def mesh_unstructured():
    return build_unstructured(0.31, seed=1)


@pytest.fixture(scope="session")
def sine():
    return sine_case().validate()


@pytest.fixture(scope="session")
def bubble():
    return bubble_case().validate()


@pytest.fixture(scope="session")
def zero():
    return zero_case()


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
