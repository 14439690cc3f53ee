"""Loss and error functions shared by training and attack metrics."""

import numpy as np

# floor for log arguments; prevents -inf on saturated softmax outputs
LOG_EPS = 1e-7


def _as_rows(a, b, op):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 1:
        return a[None, :], b[None, :]
    return a, b


def cross_entropy(y, y_hat):
    """Mean over the batch of -sum_i y_i * log(y_hat_i).

    `y` is the reference distribution, `y_hat` the estimate; y_hat entries
    are clamped to [LOG_EPS, 1] before the log.
    """
    y, y_hat = _as_rows(y, y_hat, "cross_entropy")
    clamped = np.clip(y_hat, LOG_EPS, 1.0)
    per_row = -(y * np.log(clamped)).sum(axis=1)
    return float(per_row.mean())


def cross_entropy_grad(y, y_hat):
    """d(mean cross-entropy)/d(y_hat), zero where the clamp is active."""
    y, y_hat = _as_rows(y, y_hat, "cross_entropy")
    clamped = np.clip(y_hat, LOG_EPS, 1.0)
    grad = -(y / clamped) / y.shape[0]
    grad[(y_hat < LOG_EPS) | (y_hat > 1.0)] = 0.0
    return grad.astype(y_hat.dtype, copy=False)


def cross_entropy_grad_rows(y, y_hat):
    """Per-row cross-entropy gradient without the batch mean (used by the
    per-example clipping path of the noisy trainer)."""
    y, y_hat = _as_rows(y, y_hat, "cross_entropy")
    clamped = np.clip(y_hat, LOG_EPS, 1.0)
    grad = -(y / clamped)
    grad[(y_hat < LOG_EPS) | (y_hat > 1.0)] = 0.0
    return grad.astype(y_hat.dtype, copy=False)


def mean_absolute_error(y, y_hat):
    """Mean of |y - y_hat| over all elements."""
    y, y_hat = _as_rows(y, y_hat, "mean_absolute_error")
    return float(np.abs(y - y_hat).mean())
