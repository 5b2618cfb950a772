import numpy as np
import pytest

from rsphead import tensor


@pytest.fixture(autouse=True, scope="session")
def _debug_checks():
    # Catch non-finite values at the op that produced them instead of at the loss.
    tensor.set_debug_checks(True)
    yield
    tensor.set_debug_checks(False)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
