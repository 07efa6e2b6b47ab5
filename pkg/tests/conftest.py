import numpy as np
import pytest

from rankscope import network as nw


def central_difference(f, x, h=1e-6):
    """Jacobian of ``f`` (column batch -> column batch) at the vector ``x``."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((f((x + e)[:, None]) - f((x - e)[:, None]))[:, 0] / (2 * h))
    return np.column_stack(cols)


def random_network(rng, max_depth=6, max_width=32, a=None, bias_scale=0.5):
    L = int(rng.integers(1, max_depth + 1))
    widths = tuple(int(w) for w in rng.integers(1, max_width + 1, size=L + 1))
    slope = float(rng.uniform(-0.5, 0.5)) if a is None else a
    p = nw.init(widths, slope, seed=int(rng.integers(2**31)))
    biases = [bias_scale * rng.standard_normal(b.shape) for b in p.biases]
    return p.replace(biases=biases)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
