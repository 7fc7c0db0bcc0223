"""Input validation helpers shared by the estimators and the harness."""

from __future__ import annotations

import numbers

import numpy as np

from .graph import N_FEATURES
from .sim.geometry import N_LANES


def check_features(X, n_nodes=N_LANES, n_features=N_FEATURES):
    """Return ``X`` as a finite float (n_nodes, n_features) array or raise ValueError."""
    X = np.asarray(X, dtype=float)
    if X.shape != (n_nodes, n_features):
        raise ValueError(f"node features must have shape ({n_nodes}, {n_features}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("node features contain non-finite values")
    return X


def check_vector(x, size, name="vector", low=None, high=None):
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != size:
        raise ValueError(f"{name} must have {size} entries, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    if low is not None and np.any(x < low):
        raise ValueError(f"{name} has entries below {low}")
    if high is not None and np.any(x > high):
        raise ValueError(f"{name} has entries above {high}")
    return x


def check_positive(value, name, allow_zero=False):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite number, got {value!r}")
    if value < 0 or (value == 0 and not allow_zero):
        raise ValueError(f"{name} must be {'non-negative' if allow_zero else 'positive'}, got {value}")
    return float(value)


def check_interval(value, name, low, high, closed_low=True, closed_high=True):
    value = float(value)
    ok_low = value >= low if closed_low else value > low
    ok_high = value <= high if closed_high else value < high
    if not (np.isfinite(value) and ok_low and ok_high):
        lb = "[" if closed_low else "("
        rb = "]" if closed_high else ")"
        raise ValueError(f"{name}={value} outside {lb}{low}, {high}{rb}")
    return value


def check_random_state(seed):
    """``np.random.Generator`` from None, an int, or an existing generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
