import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gt2cal.core import ModelParams


def random_model(rng, n_rules=4, n_inputs=2, sigma_scale=1.0):
    """A random but well-formed model for property tests."""
    P, M = n_rules, n_inputs
    return ModelParams(
        c=rng.normal(size=(P, M)),
        sigma=sigma_scale * (0.5 + rng.random((P, M))),
        sigma_l=0.05 + 0.3 * rng.random(M),
        sigma_r=0.05 + 0.3 * rng.random(M),
        a=rng.normal(size=(P, M)),
        a0=rng.normal(size=P),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def heteroscedastic_line(n, seed):
    """Synthetic 1-D regression task with input-proportional noise."""
    from gt2cal.harness import synthetic_heteroscedastic
    return synthetic_heteroscedastic(n, seed)
