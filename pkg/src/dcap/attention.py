"""Scaled dot-product multi-head self-attention over field embeddings."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, ContractError, DimensionError


@dataclass
class MultiHeadParams:
    query: list  # h Tensors [d, d_v]
    key: list
    value: list
    output: nx.Tensor  # [h * d_v, d]

    def __post_init__(self):
        h = len(self.query)
        if not (h == len(self.key) == len(self.value)) or h == 0:
            raise ConfigurationError("query/key/value need the same non-zero number of heads")
        d, dv = self.query[0].shape
        for w in (*self.query, *self.key, *self.value):
            if w.shape != (d, dv):
                raise DimensionError(f"projection {w.shape} differs from {(d, dv)}")
        if self.output.shape != (h * dv, d):
            raise DimensionError(f"output projection {self.output.shape} should be {(h * dv, d)}")

    @property
    def heads(self):
        return len(self.query)

    @property
    def dim(self):
        return self.query[0].shape[0]

    @property
    def head_dim(self):
        return self.query[0].shape[1]

    @classmethod
    def init(cls, d, h, rng=None, prefix="attention"):
        """Glorot-uniform projections with d_q = d_k = d_v = d / h."""
        if h < 1 or d % h:
            raise ConfigurationError(f"embedding dim {d} is not divisible by {h} heads")
        rng = np.random.default_rng(rng)
        dv = d // h

        def glorot(shape, name):
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            return nx.Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)

        q = [glorot((d, dv), f"{prefix}.head{i}.query") for i in range(h)]
        k = [glorot((d, dv), f"{prefix}.head{i}.key") for i in range(h)]
        v = [glorot((d, dv), f"{prefix}.head{i}.value") for i in range(h)]
        o = glorot((h * dv, d), f"{prefix}.output")
        return cls(q, k, v, o)

    def named_parameters(self):
        for i in range(self.heads):
            yield f"head{i}.query", self.query[i]
            yield f"head{i}.key", self.key[i]
            yield f"head{i}.value", self.value[i]
        yield "output", self.output

    def parameters(self):
        return [p for _, p in self.named_parameters()]


@dataclass
class AttentionWeights:
    """Per-head softmax weights, each ``[n, n]`` or ``[B, n, n]``."""

    heads: list

    def batch_mean(self) -> list:
        return [w.mean(axis=0) if w.ndim == 3 else w for w in self.heads]


def scaled_attention(Q: nx.Tensor, K: nx.Tensor, V: nx.Tensor, frozen=None):
    """softmax(Q K^T / sqrt(d_v)) V.

    With ``frozen`` (an array of weights) the softmax is skipped and the
    given weights are used as constants; the verification harness relies on
    this to hold the attention coefficients fixed.
    Returns ``(output, weights)`` with weights as a plain array.
    """
    if Q.shape[-2] == 0:
        raise ContractError("attention over zero fields")
    if not (Q.shape[:-1] == K.shape[:-1] == V.shape[:-1]):
        raise DimensionError(f"Q {Q.shape}, K {K.shape}, V {V.shape} disagree on rows")
    if frozen is None:
        scores = nx.scale(nx.matmul(Q, nx.transpose(K)), 1.0 / math.sqrt(V.shape[-1]))
        alpha = nx.softmax_rows(scores)
    else:
        alpha = nx.Tensor(frozen)
    return nx.matmul(alpha, V), alpha.data


def multi_head(X: nx.Tensor, params: MultiHeadParams, frozen=None):
    """Concat(head_1..head_h) W^O; every head reads the same input ``X``."""
    if X.shape[-1] != params.dim:
        raise DimensionError(f"input has {X.shape[-1]} columns, attention expects {params.dim}")
    outs, weights = [], []
    for i in range(params.heads):
        Q = nx.matmul(X, params.query[i])
        K = nx.matmul(X, params.key[i])
        V = nx.matmul(X, params.value[i])
        z, a = scaled_attention(Q, K, V, None if frozen is None else frozen.heads[i])
        outs.append(z)
        weights.append(a)
    H = outs[0] if len(outs) == 1 else nx.concat(outs, axis=-1)
    return nx.matmul(H, params.output), AttentionWeights(weights)
