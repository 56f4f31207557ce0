import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from memloc import data as D
from memloc import tensor as T

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def project(out: T.Tensor, rng) -> T.Tensor:
    """Scalar <out, R> for a fixed random R, built only from engine primitives."""
    if out.size == 1:
        return out
    flat = T.flatten(T.multiply(out, rng.standard_normal(out.shape)))
    col = T.matmul(flat, T.Tensor(np.ones((flat.shape[1], 1))))
    return T.matmul(T.Tensor(np.ones((1, col.shape[0]))), col)


def max_rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


@pytest.fixture
def toy_ds():
    return D.inject_label_noise(D.synth_clusters(4, 25, 12, 4.0, seed=1, test_per_class=5), 0.2, seed=1)
