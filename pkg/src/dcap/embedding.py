"""Per-field embedding tables and assembly of the n x d input matrix."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ContractError, DimensionError, FeatureIndexError
from .featurestore import EncodedSample

DEFAULT_EMBEDDING_DIM = 16


@dataclass
class EmbeddingTable:
    tables: list  # one Tensor [vocab_i, d] per field
    embedding_dim: int
    field_names: list | None = None

    def __post_init__(self):
        for t in self.tables:
            if t.ndim != 2 or t.shape[1] != self.embedding_dim:
                raise DimensionError(
                    f"embedding table {t.shape} does not have {self.embedding_dim} columns"
                )

    @classmethod
    def init(cls, vocab_sizes, d=DEFAULT_EMBEDDING_DIM, rng=None, field_names=None):
        """Uniform init on [-1/sqrt(d), 1/sqrt(d)]."""
        rng = np.random.default_rng(rng)
        bound = 1.0 / np.sqrt(d)
        names = field_names or [f"field{i}" for i in range(len(vocab_sizes))]
        tables = [
            nx.Tensor(rng.uniform(-bound, bound, size=(v, d)), requires_grad=True, name=f"embedding.{nm}")
            for v, nm in zip(vocab_sizes, names)
        ]
        return cls(tables, d, list(names))

    @property
    def n_fields(self):
        return len(self.tables)

    def parameters(self):
        return list(self.tables)


def _field_name(tables: EmbeddingTable, i):
    if tables.field_names:
        return tables.field_names[i]
    return f"field{i}"


def embed(sample, tables: EmbeddingTable) -> nx.Tensor:
    """Look up one row per field.

    ``sample`` is an :class:`EncodedSample` (result ``[n, d]``) or an integer
    id array of shape ``[n]`` / ``[B, n]`` (result ``[B, n, d]`` for a batch).
    """
    if isinstance(sample, EncodedSample):
        ids = np.asarray(sample.feature_ids, dtype=np.int64)
    else:
        ids = np.asarray(sample, dtype=np.int64)
    batched = ids.ndim == 2
    ids2 = ids if batched else ids[None, :]
    n = ids2.shape[1]
    if n != tables.n_fields:
        raise DimensionError(f"sample has {n} fields, embedding has {tables.n_fields}")
    B, d = ids2.shape[0], tables.embedding_dim
    rows = []
    for i, table in enumerate(tables.tables):
        col = ids2[:, i]
        if col.min() < 0 or col.max() >= table.shape[0]:
            bad = int(col[(col < 0) | (col >= table.shape[0])][0])
            raise FeatureIndexError(
                f"id {bad} out of range for field {_field_name(tables, i)!r} "
                f"(vocabulary size {table.shape[0]})"
            )
        g = nx.gather_rows(table, col)
        rows.append(nx.reshape(g, (B, 1, d)) if batched else g)
    return nx.concat(rows, axis=1 if batched else 0)


def embed_multivalent(ids, table: nx.Tensor) -> nx.Tensor:
    """Sum of the selected rows of one field's table."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        raise ContractError("multivalent field needs at least one id")
    return nx.reduce(nx.gather_rows(table, ids), axis=0, kind="sum")
