"""Cross attentional product layers.

Each layer runs multi-head attention on its input, multiplies every
attended field vector with every later field of the *original* embedding
matrix, sums the products over the embedding axis for the prediction head,
and pools the product rows back down to n rows for the next layer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import kernels
from . import numerics as nx
from .attention import AttentionWeights, MultiHeadParams, multi_head
from .errors import ConfigurationError, DimensionError

PRODUCT_KINDS = ("inner", "outer")
DEFAULT_LAYERS = 2


@lru_cache(maxsize=None)
def _pairs(n):
    left, right = np.triu_indices(n, k=1)
    return left.astype(np.int64), right.astype(np.int64)


def pair_index(n: int) -> list[tuple[int, int]]:
    """All (i, j) with i < j in lexicographic order, zero-based."""
    left, right = _pairs(n)
    return list(zip(left.tolist(), right.tolist()))


def n_pairs(n: int) -> int:
    return n * (n - 1) // 2


def inner_product(a: nx.Tensor, b: nx.Tensor) -> nx.Tensor:
    """Component-wise product; stays a d-vector."""
    if a.shape != b.shape:
        raise DimensionError(f"inner product of {a.shape} and {b.shape}")
    return nx.mul(a, b)


def outer_product(a: nx.Tensor, b: nx.Tensor) -> nx.Tensor:
    """Component i is sum_j a_i b_j, i.e. ``a * sum(b)``."""
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"outer product needs equal-length vectors, got {a.shape} and {b.shape}")
    s = b.data.sum()
    return nx.emit("scale_by_sum", a.data * s, (a, b), (a.data, s))


@nx.register_backward("scale_by_sum")
def _scale_by_sum_bw(g, ctx):
    a, s = ctx
    return g * s, np.full_like(a, (g * a).sum())


def pair_products(Z: nx.Tensor, X: nx.Tensor, kind: str = "inner") -> nx.Tensor:
    """Row k holds product(z_i, x_j) for the k-th pair (i, j), i < j."""
    if kind not in PRODUCT_KINDS:
        raise ConfigurationError(f"product kind must be one of {PRODUCT_KINDS}, got {kind!r}")
    if Z.shape != X.shape or Z.ndim not in (2, 3):
        raise DimensionError(f"pair products need matching [n, d] operands, got {Z.shape} and {X.shape}")
    batched = Z.ndim == 3
    z = Z.data if batched else Z.data[None]
    x = X.data if batched else X.data[None]
    left, right = _pairs(z.shape[1])
    if left.size == 0:
        raise DimensionError("pair products need at least two fields")
    P = kernels.pair_expand(z, x, left, right, kind == "outer")
    return nx.emit("pair_products", P if batched else P[0], (Z, X), (z, x, kind == "outer", batched))


@nx.register_backward("pair_products")
def _pair_products_bw(g, ctx):
    z, x, outer, batched = ctx
    left, right = _pairs(z.shape[1])
    gz, gx = kernels.pair_expand_backward(g if batched else g[None], z, x, left, right, outer)
    return (gz, gx) if batched else (gz[0], gx[0])


def sum_embedding_axis(P: nx.Tensor) -> nx.Tensor:
    return nx.reduce(P, axis=-1, kind="sum")


def pool_output_length(length_in: int, kernel_size: int, stride: int, padding: int = 0) -> int:
    """Output length of a 1-D pooling window sweep."""
    return math.floor((length_in + 2 * padding - kernel_size) / stride + 1)


def adaptive_avg_pool(P: nx.Tensor, target_rows: int) -> nx.Tensor:
    """Average rows ``[floor(i*m/n), ceil((i+1)*m/n))`` into output row i.

    Pools along the cross-feature (row) axis only; columns are independent.
    """
    m = P.shape[-2]
    if not 1 <= target_rows <= m:
        raise ConfigurationError(f"cannot pool {m} rows into {target_rows}")
    batched = P.ndim == 3
    p = P.data if batched else P.data[None]
    out = kernels.adaptive_pool(p, target_rows)
    return nx.emit("adaptive_avg_pool", out if batched else out[0], (P,), (m, batched))


@nx.register_backward("adaptive_avg_pool")
def _pool_bw(g, ctx):
    m, batched = ctx
    gp = kernels.adaptive_pool_backward(g if batched else g[None], m)
    return (gp if batched else gp[0],)


@dataclass
class LayerTrace:
    Z: nx.Tensor
    P: nx.Tensor
    Y: nx.Tensor
    X_next: nx.Tensor
    attention: AttentionWeights


def layer_forward(X_l, X_0, params: MultiHeadParams, kind="inner", frozen=None,
                  residual=False, layer_norm=False) -> LayerTrace:
    """One cross attentional product layer.

    ``residual`` and ``layer_norm`` are optional extras around the
    attention output; both default off.
    """
    if X_l.shape != X_0.shape:
        raise DimensionError(f"layer input {X_l.shape} and original embedding {X_0.shape} differ")
    Z, att = multi_head(X_l, params, frozen)
    if residual:
        Z = nx.add(Z, X_l)
    if layer_norm:
        Z = nx.normalize_last(Z)
    P = pair_products(Z, X_0, kind)
    Y = sum_embedding_axis(P)
    X_next = adaptive_avg_pool(P, X_0.shape[-2])
    return LayerTrace(Z, P, Y, X_next, att)


def stack_layers(X_0, layer_params, kind="inner", frozen=None, residual=False,
                 layer_norm=False) -> list[LayerTrace]:
    """Run the layers in order; each one multiplies against the original ``X_0``."""
    if len(layer_params) < 1:
        raise ConfigurationError("at least one cross layer is required")
    traces = []
    X = X_0
    for l, params in enumerate(layer_params):
        tr = layer_forward(X, X_0, params, kind, None if frozen is None else frozen[l],
                           residual, layer_norm)
        traces.append(tr)
        X = tr.X_next
    return traces
