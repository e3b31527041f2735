import os

import numpy as np
import pytest


def slow(func):
    return pytest.mark.skipif(
        os.environ.get('DSFN_IRL_SLOW_TESTS') != '1',
        reason="Long-running; set DSFN_IRL_SLOW_TESTS=1 to run"
    )(pytest.mark.slow(func))


@pytest.fixture
def rng():
    return np.random.default_rng(0)

