"""Numpy implementations of the inner loops, used when the compiled module is absent."""
import numpy as np


def masked_xent(logits, mask, target):
    """Row-wise softmax cross-entropy restricted to ``mask``.

    Returns per-row losses ``logsumexp_{k in mask}(logits) - logits[target]``
    and their gradient with respect to ``logits``. ``target`` must lie in the mask.
    """
    n = logits.shape[0]
    rows = np.arange(n)
    keep = mask.astype(bool)
    masked = np.where(keep, logits, -np.inf)
    mx = masked.max(axis=1, keepdims=True)
    e = np.where(keep, np.exp(masked - mx), 0.0)
    s = e.sum(axis=1, keepdims=True)
    loss = (mx[:, 0] + np.log(s[:, 0])) - logits[rows, target]
    grad = e / s
    grad[rows, target] -= 1.0
    return loss, grad


def assign_nearest(X, C):
    """Index of and squared distance to the nearest row of ``C``; ties go to the lowest index."""
    d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1).astype(np.int64)
    return labels, d2[np.arange(X.shape[0]), labels]
