"""Hot kernels with a compiled backend and a numpy fallback.

The compiled extension is picked at import time unless the environment
variable ``DCAP_PURE_PYTHON`` is set to a non-empty value other than ``0``.
``BACKEND`` names the active implementation.
"""
import os

import numpy as np

from . import _pykernels

_want_pure = os.environ.get("DCAP_PURE_PYTHON", "") not in ("", "0")

try:
    if _want_pure:
        raise ImportError("pure-python backend requested")
    from . import _ckernels as _impl
    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"

_C = lambda a: np.ascontiguousarray(a, dtype=np.float64)
_I = lambda a: np.ascontiguousarray(a, dtype=np.int64)


def scatter_add_rows(out, ids, src):
    """Add ``src[r]`` into ``out[ids[r]]`` for every r, in place."""
    return _impl.scatter_add_rows(out, _I(ids), _C(src))


def pair_expand(Z, X, left, right, outer=False):
    return _impl.pair_expand(_C(Z), _C(X), _I(left), _I(right), bool(outer))


def pair_expand_backward(G, Z, X, left, right, outer=False):
    return _impl.pair_expand_backward(_C(G), _C(Z), _C(X), _I(left), _I(right), bool(outer))


def adaptive_pool(P, n):
    return _impl.adaptive_pool(_C(P), int(n))


def adaptive_pool_backward(G, m):
    return _impl.adaptive_pool_backward(_C(G), int(m))


def rank_auc(scores, labels):
    return float(_impl.rank_auc(scores, labels))


pool_bounds = _pykernels.pool_bounds

__all__ = [
    "BACKEND",
    "scatter_add_rows",
    "pair_expand",
    "pair_expand_backward",
    "adaptive_pool",
    "adaptive_pool_backward",
    "pool_bounds",
    "rank_auc",
]
