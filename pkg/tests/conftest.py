import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from flowreg.synth import bar_mesh, sphere_mesh


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture(scope="session")
def small_sphere():
    return sphere_mesh(n_lat=8, n_lon=12)


@pytest.fixture(scope="session")
def small_bar():
    return bar_mesh(nx=12, ny=4)
