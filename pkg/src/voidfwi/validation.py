"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np

__all__ = ["check_traces_batch", "check_fields_batch", "check_is_fitted"]


def check_traces_batch(X, n_sensors: int | None = None, nt: int | None = None) -> np.ndarray:
    """Coerce to a finite float array of shape (n_samples, n_sensors, nt);
    a single (n_sensors, nt) sample gains a leading axis."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"traces must be (n_samples, n_sensors, nt), got shape {X.shape}")
    if n_sensors is not None and X.shape[1] != n_sensors:
        raise ValueError(f"expected {n_sensors} sensor channels, got {X.shape[1]}")
    if nt is not None and X.shape[2] != nt:
        raise ValueError(f"expected {nt} time samples, got {X.shape[2]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("traces contain non-finite values")
    return X


def check_fields_batch(y, field_shape: tuple[int, int], n_samples: int | None = None) -> np.ndarray:
    """Coerce to (n_samples, ny, nx); accepts flat fields of matching size."""
    y = np.asarray(y, dtype=np.float64)
    ny, nx = field_shape
    if y.ndim == 2 and y.shape == field_shape:
        y = y[None]
    elif y.ndim == 2 and y.shape[1] == ny * nx:
        y = y.reshape(-1, ny, nx)
    if y.ndim != 3 or y.shape[1:] != field_shape:
        raise ValueError(f"fields must be (n_samples, {ny}, {nx}), got shape {y.shape}")
    if n_samples is not None and y.shape[0] != n_samples:
        raise ValueError(f"expected {n_samples} fields, got {y.shape[0]}")
    if not np.all(np.isfinite(y)):
        raise ValueError("fields contain non-finite values")
    return y


def check_is_fitted(estimator, attribute: str):
    if not hasattr(estimator, attribute):
        raise RuntimeError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first"
        )
