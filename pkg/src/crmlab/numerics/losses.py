from __future__ import annotations

import numpy as np

from crmlab.errors import ShapeError


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row softmax evaluated in float64."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def diagonal_cross_entropy(logits: np.ndarray):
    """Mean of -log softmax(logits[i])[i] and its gradient w.r.t. the logits.

    Returns ``(loss, grad_logits, probs)``; the loss and probabilities are float64,
    the gradient has the dtype of ``logits``.
    """
    b = logits.shape[0]
    z = logits.astype(np.float64)
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    loss = float(np.mean(lse - np.diagonal(z)))
    probs = np.exp(z - lse[:, None])
    grad = probs.copy()
    grad[np.arange(b), np.arange(b)] -= 1.0
    grad /= b
    return max(loss, 0.0), grad.astype(logits.dtype), probs


def inbatch_softmax_loss(user_reps, item_reps, temperature: float = 1.0, return_probs: bool = False):
    """In-batch softmax: row i's positive is item i, every other row's item is a negative.

    Returns ``(loss, grad_user, grad_item)`` and, with ``return_probs``, the
    B x B matrix of row probabilities as a fourth element.
    """
    if user_reps.ndim != 2 or user_reps.shape != item_reps.shape:
        raise ShapeError(f"user {user_reps.shape} and item {item_reps.shape} batches must match")
    b = user_reps.shape[0]
    if b < 2:
        raise ValueError("in-batch softmax needs at least 2 rows for negatives")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    inv_t = np.asarray(1.0 / temperature, dtype=user_reps.dtype)
    logits = (user_reps @ item_reps.T) * inv_t
    loss, dlogits, probs = diagonal_cross_entropy(logits)
    grad_user = (dlogits @ item_reps) * inv_t
    grad_item = (dlogits.T @ user_reps) * inv_t
    if return_probs:
        return loss, grad_user, grad_item, probs
    return loss, grad_user, grad_item
