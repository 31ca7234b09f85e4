from __future__ import annotations

import numpy as np

from ..exceptions import DimensionError, NumericError
from .tensor import Tensor, log_softmax


def _check_finite(loss: Tensor, what: str) -> Tensor:
    if not np.all(np.isfinite(loss.data)):
        raise NumericError(f"{what} is not finite: {loss.data!r}")
    return loss


def cross_entropy(logits, label) -> Tensor:
    """Negative log-probability of ``label`` under ``softmax(logits)``.

    ``logits`` is ``(n_classes,)`` with an integer label, or
    ``(batch, n_classes)`` with one label per row (the batch mean is returned).
    """
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    if logits.ndim == 1:
        n_classes = logits.shape[0]
        label = int(label)
        if not 0 <= label < n_classes:
            raise IndexError(f"label {label} out of range for {n_classes} classes")
        return _check_finite(-log_softmax(logits)[label], "cross-entropy")
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects 1-D or 2-D logits, got {logits.shape}")
    labels = np.asarray(label, dtype=np.int64).reshape(-1)
    batch, n_classes = logits.shape
    if labels.shape[0] != batch:
        raise DimensionError(f"{labels.shape[0]} labels for {batch} rows")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise IndexError(f"labels out of range for {n_classes} classes")
    picked = log_softmax(logits, axis=1)[np.arange(batch), labels]
    return _check_finite(-picked.mean(), "cross-entropy")
