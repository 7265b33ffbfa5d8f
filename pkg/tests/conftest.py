import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from condinv import assemble_components, make_grid, make_partition


@pytest.fixture(scope="session")
def toy_system():
    """Small assembled system shared across tests: n=9, q=2."""
    grid = make_grid(9)
    part = make_partition(grid, 2)
    return part, assemble_components(grid, part)


@pytest.fixture(scope="session")
def mid_system():
    """Mid-size system for oracle comparisons: n=7, q=4."""
    grid = make_grid(7)
    part = make_partition(grid, 4)
    return part, assemble_components(grid, part)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
