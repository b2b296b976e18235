"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length


class ConfigurationError(ValueError):
    """Raised when a declarative spec or pipeline config is inconsistent."""


class RankDeficiencyError(np.linalg.LinAlgError):
    """Raised when a design matrix is not of full column rank."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = list(columns)


def check_design(X, y=None, *, min_rows_over_cols=True):
    """Validate a regressor matrix (and optional outcome) as finite float64."""
    X = check_array(X, dtype=np.float64, ensure_2d=True, ensure_all_finite=True)
    if y is not None:
        y = check_array(y, dtype=np.float64, ensure_2d=False, ensure_all_finite=True)
        if y.ndim != 1:
            raise ValueError(f"outcome must be one-dimensional, got shape {y.shape}")
        check_consistent_length(X, y)
    if min_rows_over_cols and X.shape[0] <= X.shape[1]:
        raise ValueError(f"need n > k, got n={X.shape[0]}, k={X.shape[1]}")
    return X, y


def check_groups(groups, n_samples):
    """Return integer cluster codes for ``groups``; ``None`` means one row per cluster."""
    if groups is None:
        return np.arange(n_samples), n_samples
    groups = np.asarray(groups)
    if groups.shape != (n_samples,):
        raise ValueError(f"groups must have shape ({n_samples},), got {groups.shape}")
    _, codes = np.unique(groups, return_inverse=True)
    n_groups = int(codes.max()) + 1 if n_samples else 0
    if n_groups < 2:
        raise ValueError("cluster-robust covariance needs at least 2 clusters")
    return codes.astype(np.intp), n_groups


def column_names(names, k, prefix="x"):
    if names is None:
        return [f"{prefix}{j}" for j in range(k)]
    names = [str(n) for n in names]
    if len(names) != k:
        raise ValueError(f"expected {k} column names, got {len(names)}")
    if len(set(names)) != k:
        raise ValueError("column names must be unique")
    return names
