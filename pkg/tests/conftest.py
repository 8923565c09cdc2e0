import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


def random_unit_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
