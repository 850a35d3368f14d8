import numpy as np
import pytest

from dpgan_lab import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def weighted_sum(seed: int = 0):
    """Loss builder: contracts any output with a fixed random weight so every entry matters.

    Weights are scaled by 1/sqrt(numel) so the loss stays O(1); float32 central
    differences carry ~ulp(loss)/(2*eps) of rounding noise, which must stay
    well under the 1e-3 tolerance.
    """
    cache = {}

    def loss(out: T.Tensor) -> T.Tensor:
        if out.shape not in cache:
            w = np.random.default_rng(seed).normal(size=out.shape) / np.sqrt(max(1, out.size))
            cache[out.shape] = w.astype(np.float32)
        return (out * T.Tensor(cache[out.shape])).sum()
    return loss
