import numpy as np
import pytest

from arrayloc import beamform
from arrayloc.geometry import default_ava_array, default_look_directions


@pytest.fixture(scope="session")
def geom():
    return default_ava_array()


@pytest.fixture(scope="session")
def sdb_design(geom):
    """Default 15-direction design, shared across tests (design is pure)."""
    return beamform.design_sdb(geom, default_look_directions(15))


@pytest.fixture()
def rng():
    return np.random.Generator(np.random.PCG64(1234))
