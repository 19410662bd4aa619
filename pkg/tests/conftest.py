import os
import sys

import numpy as np
import pytest

from idf.core import _backend
from idf.modules import ModelWeights

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture(params=_backend.available())
def backend(request):
    """Run the test once per importable kernel backend."""
    prev = _backend.name
    _backend.use(request.param)
    yield request.param
    _backend.use(prev)


def random_weights(seed, hidden_width=56, kernel_size=3, bias_scale=0.1):
    """Kaiming draw plus random (nonzero) biases."""
    w = ModelWeights.init(hidden_width, kernel_size, 3, seed=seed)
    rng = np.random.default_rng(seed + 10_000)
    params = {k: (v + rng.normal(0, bias_scale, v.shape) if k.endswith(".b") else v)
              for k, v in w.params.items()}
    return w.with_params(params)
