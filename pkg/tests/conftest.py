from __future__ import annotations

import numpy as np
import pytest


def central_diff(f, x, h=1e-5):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def rel_err(got, want) -> float:
    """Max-norm relative error, guarded for near-zero references."""
    got, want = np.asarray(got), np.asarray(want)
    scale = max(np.max(np.abs(want)), 1e-8)
    return float(np.max(np.abs(got - want)) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
