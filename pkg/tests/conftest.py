import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ensplat import autodiff as ad


@pytest.fixture(autouse=True)
def _debug_checks():
    # Fail loudly on non-finite op outputs in every test.
    ad.set_debug_checks(True)
    yield
    ad.set_debug_checks(False)


@pytest.fixture
def f64():
    with ad.using_dtype(np.float64):
        yield np.float64
