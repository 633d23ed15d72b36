"""Input validation helpers shared by the estimator wrappers."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.utils.validation import check_array

from .numerics import DTYPE
from .tasks import IGNORE_INDEX


def check_sequences(X, name: str = "X") -> np.ndarray:
    """Validate a batch of sequences ``[n_samples, n_steps, n_features]`` as float64.

    A 2-D array is read as a single sequence ``[n_steps, n_features]``.
    """
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64, input_name=name)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"{name} must have shape (n_samples, n_steps, n_features), got {X.shape}")
    if X.shape[1] < 1 or X.shape[2] < 1:
        raise ValueError(f"{name} needs at least one step and one feature")
    return X


def check_sequence_labels(y, X: np.ndarray) -> np.ndarray:
    """Per-step integer labels ``[n_samples, n_steps]``; ``-100`` marks ignored steps."""
    y = check_array(y, ensure_2d=True, dtype=None, input_name="y")
    if y.shape != X.shape[:2]:
        raise ValueError(f"y has shape {y.shape}, expected {X.shape[:2]}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("y must hold integer class labels")
        y = y.astype(np.int64)
    valid = y[y != IGNORE_INDEX]
    if valid.size == 0:
        raise ValueError("y has no labelled steps")
    if valid.min() < 0:
        raise ValueError("labels must be non-negative (or -100 to ignore a step)")
    return y.astype(np.int64)


def as_tensor(X: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(X, dtype=np.float64)).to(DTYPE)
