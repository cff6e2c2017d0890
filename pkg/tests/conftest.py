import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from rwre.auxwalk import build_params  # noqa: E402
from rwre.envlaw import make_tilt_mixture, zero_disorder  # noqa: E402
from rwre.regen import sample_cycles  # noqa: E402

REF_Y = (0.5, 0.0)
REF_ALPHA = np.full(4, 0.25)


@pytest.fixture(scope="session")
def ref_params():
    return build_params(REF_Y, REF_ALPHA)


@pytest.fixture(scope="session")
def ref_law_eps01():
    return make_tilt_mixture(REF_ALPHA, 0.1)


@pytest.fixture(scope="session")
def ref_cycles(ref_params):
    """Zero-disorder cycles at the reference point, shared across test modules."""
    return sample_cycles(ref_params, zero_disorder(REF_ALPHA), 200000, seed=11)
