import numpy as np
import pytest

from voltvar.feeder import FeederModel, LineSegment, build_ieee33
from voltvar.neural import MinMaxScaler, NeuralPfModel


@pytest.fixture(scope="session")
def ieee33():
    return build_ieee33()


def random_feeder(rng, n, der_fraction=1.0, load_scale=0.05):
    """Random radial feeder: bus ``b`` hangs off a uniformly chosen earlier bus."""
    lines = []
    for b in range(1, n + 1):
        parent = int(rng.integers(0, b))
        lines.append(LineSegment(parent, b, float(rng.uniform(0.005, 0.05)), float(rng.uniform(0.005, 0.05))))
    ders = tuple(b for b in range(1, n + 1) if rng.random() < der_fraction) or (n,)
    k = len(ders)
    return FeederModel(n, 1.0, tuple(lines), ders, np.full(k, -0.1), np.full(k, 0.6),
                       rng.uniform(0, load_scale, n), rng.uniform(0, load_scale, n), "random")


def random_nn(rng, n, k, in_lo=None, in_hi=None):
    in_lo = np.zeros(2 * n) if in_lo is None else in_lo
    in_hi = np.ones(2 * n) if in_hi is None else in_hi
    return NeuralPfModel(
        rng.normal(0, 1, (k, 2 * n)), rng.normal(0, 0.5, k), rng.normal(0, 1, (n, k)),
        MinMaxScaler(in_lo, in_hi), MinMaxScaler(np.full(n, 0.9), np.full(n, 1.0)),
    )
