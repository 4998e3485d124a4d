"""Backend selection for the hot kernels.

The compiled extension is used when importable, unless ``DOMCLP_PURE_PYTHON``
is set. Both backends accept arbitrary array-likes; inputs are coerced to the
contiguous dtypes the compiled loops expect.
"""
import os

import numpy as np

from . import _pykernels

try:
    if os.environ.get("DOMCLP_PURE_PYTHON"):
        raise ImportError("pure python requested")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "numpy"


def _prep(logits, mask, target):
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    target = np.ascontiguousarray(target, dtype=np.int64)
    if logits.shape != mask.shape or target.shape != (logits.shape[0],):
        raise ValueError("logits, mask and target shapes disagree")
    if not mask[np.arange(len(target)), target].all():
        raise ValueError("every target column must be inside the mask")
    return logits, mask, target


def masked_xent(logits, mask, target, backend=None):
    impl = _select(backend)
    return impl.masked_xent(*_prep(logits, mask, target))


def assign_nearest(X, C, backend=None):
    impl = _select(backend)
    X = np.ascontiguousarray(X, dtype=np.float64)
    C = np.ascontiguousarray(C, dtype=np.float64)
    return impl.assign_nearest(X, C)


def _select(backend):
    if backend is None:
        return _impl
    if backend == "numpy":
        return _pykernels
    if backend == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown backend {backend!r}")
