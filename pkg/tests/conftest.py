import numpy as np
import pytest

from limbforge.params import gen_params
from limbforge.keys import keygen, make_rotation_key


@pytest.fixture(scope="session")
def params16():
    """Tiny ring for exact-arithmetic oracle tests."""
    return gen_params(16, 2, d=1, seed=7)


@pytest.fixture(scope="session")
def params_small():
    """Fast ring for homomorphic-op tests."""
    return gen_params(256, 4, d=3, seed=3)


@pytest.fixture(scope="session")
def params_desk():
    """The default desk-scale configuration."""
    return gen_params(4096, 6, d=3, seed=0)


@pytest.fixture(scope="session")
def keys_small(params_small):
    return keygen(params_small, seed=11)


@pytest.fixture(scope="session")
def keys_desk(params_desk):
    return keygen(params_desk, seed=11)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)


def rotation_keys(params, sk, steps_list, seed=99):
    rng = np.random.default_rng(seed)
    return {s % params.n: make_rotation_key(params, sk, s, rng)
            for s in steps_list if s % params.n != 0}
