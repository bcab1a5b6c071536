"""Input validation helpers shared by the estimators."""

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import DataError, ParameterError


def check_samples(X, n_features=None):
    """2-D finite float array; optional feature-count check."""
    try:
        X = check_array(X, dtype=np.float64, ensure_all_finite=True)
    except TypeError:  # scikit-learn < 1.6
        X = check_array(X, dtype=np.float64, force_all_finite=True)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    if n_features is not None and X.shape[1] != n_features:
        raise DataError(f"expected {n_features} features, got {X.shape[1]}")
    return X


def check_vectors(v, name="signal"):
    """Array of 3-component vectors, returned as ``(n, 3)``."""
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DataError(f"{name} must have 3 components per row, got shape {np.shape(v)}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    return arr


def check_distribution(w, atol=1e-9, name="weights"):
    w = np.asarray(w, dtype=float)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise DataError(f"{name} must be finite and non-negative")
    total = w.sum(axis=-1)
    if np.any(np.abs(total - 1.0) > atol):
        raise DataError(f"{name} must sum to 1 (got {np.atleast_1d(total)[0]!r})")
    return w


def check_choice(value, allowed, name):
    if value not in allowed:
        raise ParameterError(f"{name} must be one of {sorted(allowed)}, got {value!r}")
    return value
