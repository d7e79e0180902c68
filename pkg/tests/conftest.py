from __future__ import annotations

import numpy as np
import pytest

from kinedyn.data import SyntheticPlantConfig, preprocess, synthesize
from kinedyn.skeleton import make_biped, make_chain


@pytest.fixture(scope="session")
def walker():
    return make_biped()


@pytest.fixture(scope="session")
def chain2():
    return make_chain(2, link_length=0.5, point_mass=True, com_at_end=True,
                      name="pendulum2", point_radius=0.05)


@pytest.fixture(scope="session")
def walk_windows():
    """Small noisy walking set shared by slow pipeline/training tests."""
    cfg = SyntheticPlantConfig(kind="keyframed_walk", sigma=0.02,
                               burst_count=2, burst_offset=0.2,
                               burst_duration=10, seed=1, fps=100.0)
    seq = synthesize(cfg, duration=8.0)
    return preprocess(seq, target_fps=50.0, window=100)


def random_state(char, rng, scale=0.3):
    """Generic pose/velocity draw used by oracle suites."""
    q = rng.normal(0.0, scale, char.nq)
    qdot = rng.normal(0.0, scale, char.nq)
    return q, qdot


@pytest.fixture
def rng():
    return np.random.default_rng(0)
