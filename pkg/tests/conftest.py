import numpy as np
import pytest

from jpcm.dynamics import QuadParams
from jpcm.so3 import exp_so3
from jpcm.states import QuadState, RotorSpeeds, Wrench


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def params():
    return QuadParams()


def random_rotation(rng, max_angle=np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return exp_so3(axis * rng.uniform(0.0, max_angle))


def random_state(rng, scale=1.0):
    return QuadState(
        rng.normal(size=3) * scale,
        random_rotation(rng, 3.0),
        rng.normal(size=3) * scale,
        rng.normal(size=3) * scale,
    )


def random_wrench(rng):
    return Wrench(rng.uniform(5.0, 15.0), rng.normal(size=3) * 0.1)


def random_rotors(rng, params=None):
    p = params or QuadParams()
    return RotorSpeeds(rng.uniform(p.u_min, p.u_max, 4))
