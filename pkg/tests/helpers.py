"""Shared oracles for the test suite."""

import numpy as np

from fedfair.model import Batch


def random_batch(n: int, dims: int, classes: int, seed: int = 0) -> Batch:
    rng = np.random.default_rng(seed)
    return Batch(rng.normal(size=(n, dims)), rng.integers(0, classes, size=n))


def central_diff(f, x: np.ndarray, coords, h: float = 1e-6) -> np.ndarray:
    out = np.empty(len(coords))
    for j, i in enumerate(coords):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        out[j] = (f(xp) - f(xm)) / (2 * h)
    return out


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
