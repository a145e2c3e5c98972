"""DCAP end to end, plus logistic-regression and FM baselines, and checkpoints."""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .attention import MultiHeadParams
from .crossnet import DEFAULT_LAYERS, PRODUCT_KINDS, n_pairs, stack_layers
from .embedding import DEFAULT_EMBEDDING_DIM, EmbeddingTable, embed
from .errors import CheckpointError, ConfigurationError, ContractError, DimensionError, FeatureIndexError
from .featurestore import EncodedSample

PROB_EPS = 1e-7
DEFAULT_HEADS = 4
DEFAULT_HIDDEN = (100, 100)
DROPOUT = {"movielens": 0.5, "criteo": 0.2, "avazu": 0.2}

CHECKPOINT_MAGIC = b"DCAPCK1"
CHECKPOINT_VERSION = 1


@dataclass
class DcapConfig:
    vocab_sizes: list
    field_names: list | None = None
    embedding_dim: int = DEFAULT_EMBEDDING_DIM
    layers: int = DEFAULT_LAYERS
    heads: int = DEFAULT_HEADS
    product: str = "inner"
    hidden: tuple = DEFAULT_HIDDEN
    dropout: float = 0.5
    seed: int = 0
    residual: bool = False  # optional extra, off by default
    layer_norm: bool = False  # optional extra, off by default

    def __post_init__(self):
        self.vocab_sizes = [int(v) for v in self.vocab_sizes]
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.field_names is None:
            self.field_names = [f"field{i}" for i in range(len(self.vocab_sizes))]
        self.field_names = list(self.field_names)
        self.validate()

    def validate(self):
        if len(self.vocab_sizes) < 1 or min(self.vocab_sizes) < 1:
            raise ConfigurationError("every field needs a vocabulary of at least one id")
        if len(self.field_names) != len(self.vocab_sizes):
            raise ConfigurationError("field_names and vocab_sizes differ in length")
        if self.embedding_dim < 1 or self.heads < 1 or self.embedding_dim % self.heads:
            raise ConfigurationError(
                f"embedding_dim {self.embedding_dim} must be divisible by heads {self.heads}"
            )
        if self.layers < 1:
            raise ConfigurationError("layers must be >= 1")
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigurationError("hidden sizes must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")
        if self.product not in PRODUCT_KINDS:
            raise ConfigurationError(f"product must be one of {PRODUCT_KINDS}")

    @property
    def n_fields(self):
        return len(self.vocab_sizes)

    @property
    def dense_input_width(self):
        """n*d flattened embeddings plus n(n-1)/2 cross sums per layer."""
        return dense_input_width(self.n_fields, self.embedding_dim, self.layers)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def dense_input_width(n, d, layers):
    return n * d + layers * n_pairs(n)


def _ids_of(batch):
    if isinstance(batch, EncodedSample):
        return np.asarray([batch.feature_ids], dtype=np.int64)
    if isinstance(batch, (list, tuple)) and batch and isinstance(batch[0], EncodedSample):
        return np.asarray([s.feature_ids for s in batch], dtype=np.int64)
    ids = np.asarray(batch, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.shape[0] == 0:
        raise ContractError("empty batch")
    return ids


def _linear_init(rng, fan_in, fan_out, name):
    bound = 1.0 / math.sqrt(fan_in)
    W = nx.Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True, name=f"{name}.weight")
    b = nx.Tensor(rng.uniform(-bound, bound, size=(fan_out,)), requires_grad=True, name=f"{name}.bias")
    return W, b


class Model:
    """Common surface: named parameters in a fixed order and a forward pass."""

    kind = "base"

    def __init__(self, config: DcapConfig):
        self.config = config

    def named_parameters(self):
        raise NotImplementedError

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def forward(self, batch, training=False, rng=None):
        """Click probabilities as a ``[B]`` tensor."""
        raise NotImplementedError

    def predict(self, ids, batch_size=65536):
        """Eval-mode probabilities as a plain array, evaluated in chunks."""
        ids = _ids_of(ids)
        out = [self.forward(ids[s:s + batch_size]).data for s in range(0, ids.shape[0], batch_size)]
        return np.concatenate(out)

    def snapshot(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def restore(self, snap):
        for name, p in self.named_parameters():
            p.data = snap[name].copy()

    def _check_ids(self, ids):
        if ids.shape[1] != self.config.n_fields:
            raise DimensionError(f"batch has {ids.shape[1]} fields, model expects {self.config.n_fields}")
        for i, v in enumerate(self.config.vocab_sizes):
            col = ids[:, i]
            if col.min() < 0 or col.max() >= v:
                raise FeatureIndexError(
                    f"id out of range for field {self.config.field_names[i]!r} (size {v})"
                )


class DCAP(Model):
    kind = "dcap"

    def __init__(self, config: DcapConfig, rng=None):
        super().__init__(config)
        rng = np.random.default_rng(config.seed if rng is None else rng)
        c = config
        self.embedding = EmbeddingTable.init(c.vocab_sizes, c.embedding_dim, rng, c.field_names)
        self.layers = [
            MultiHeadParams.init(c.embedding_dim, c.heads, rng, prefix=f"layer{l}") for l in range(c.layers)
        ]
        widths = [c.dense_input_width, *c.hidden, 1]
        self.dense = [_linear_init(rng, a, b, f"dense{k}") for k, (a, b) in enumerate(zip(widths, widths[1:]))]

    def named_parameters(self):
        for name, t in zip(self.config.field_names, self.embedding.tables):
            yield f"embedding.{name}", t
        for l, mh in enumerate(self.layers):
            for name, t in mh.named_parameters():
                yield f"layer{l}.{name}", t
        for k, (W, b) in enumerate(self.dense):
            yield f"dense{k}.weight", W
            yield f"dense{k}.bias", b

    def parameter_groups(self):
        """Parameters bucketed the way the gradient suite reports them."""
        groups = {"embedding": self.embedding.parameters()}
        for l, mh in enumerate(self.layers):
            for i in range(mh.heads):
                groups[f"layer{l}.head{i}.query"] = [mh.query[i]]
                groups[f"layer{l}.head{i}.key"] = [mh.key[i]]
                groups[f"layer{l}.head{i}.value"] = [mh.value[i]]
            groups[f"layer{l}.output"] = [mh.output]
        for k, (W, b) in enumerate(self.dense):
            groups[f"dense{k}"] = [W, b]
        return groups

    def head(self, feats, training=False, rng=None):
        h = feats
        last = len(self.dense) - 1
        for k, (W, b) in enumerate(self.dense):
            h = nx.add_bias(nx.matmul(h, W), b)
            if k < last:
                h = nx.relu(h)
                if training and self.config.dropout > 0:
                    h = dropout(h, self.config.dropout, rng)
        return nx.reshape(h, (h.shape[0],))

    def forward(self, batch, training=False, rng=None, return_traces=False, frozen=None):
        ids = _ids_of(batch)
        self._check_ids(ids)
        c = self.config
        X0 = embed(ids, self.embedding)
        traces = stack_layers(X0, self.layers, c.product, frozen, c.residual, c.layer_norm)
        B = ids.shape[0]
        feats = nx.concat([nx.reshape(X0, (B, c.n_fields * c.embedding_dim)), *[t.Y for t in traces]], axis=1)
        probs = nx.sigmoid(self.head(feats, training, rng))
        return (probs, traces) if return_traces else probs


def dropout(h: nx.Tensor, rate: float, rng) -> nx.Tensor:
    """Inverted dropout: kept units are scaled by 1 / (1 - rate)."""
    if rng is None:
        raise ContractError("training-mode dropout needs a random generator")
    keep = (rng.random(h.shape) >= rate) / (1.0 - rate)
    return nx.mul(h, nx.Tensor(keep))


def dcap_forward(batch, model: DCAP, mode="eval", rng=None, keep_traces=False):
    """Probabilities and (optionally) per-layer traces for a batch."""
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    probs, traces = model.forward(batch, training=mode == "train", rng=rng, return_traces=True)
    return probs, (traces if keep_traces else None)


class LogisticRegression(Model):
    kind = "lr"

    def __init__(self, config: DcapConfig, rng=None):
        super().__init__(config)
        self.weights = [
            nx.Tensor(np.zeros((v, 1)), requires_grad=True, name=f"linear.{nm}")
            for v, nm in zip(config.vocab_sizes, config.field_names)
        ]
        self.bias = nx.Tensor(np.zeros(1), requires_grad=True, name="bias")

    def named_parameters(self):
        for nm, w in zip(self.config.field_names, self.weights):
            yield f"linear.{nm}", w
        yield "bias", self.bias

    def linear_logit(self, ids):
        terms = [nx.gather_rows(w, ids[:, i]) for i, w in enumerate(self.weights)]
        s = terms[0]
        for t in terms[1:]:
            s = nx.add(s, t)
        return nx.add_bias(s, self.bias)  # [B, 1]

    def forward(self, batch, training=False, rng=None):
        ids = _ids_of(batch)
        self._check_ids(ids)
        z = self.linear_logit(ids)
        return nx.sigmoid(nx.reshape(z, (ids.shape[0],)))


class FactorizationMachine(LogisticRegression):
    """Linear term plus sum over field pairs of <v_i, v_j>."""

    kind = "fm"

    def __init__(self, config: DcapConfig, rng=None):
        super().__init__(config)
        rng = np.random.default_rng(config.seed if rng is None else rng)
        self.latent = EmbeddingTable(
            [
                nx.Tensor(rng.normal(0.0, 0.01, size=(v, config.embedding_dim)), requires_grad=True,
                          name=f"latent.{nm}")
                for v, nm in zip(config.vocab_sizes, config.field_names)
            ],
            config.embedding_dim,
            config.field_names,
        )

    def named_parameters(self):
        yield from super().named_parameters()
        for nm, t in zip(self.config.field_names, self.latent.tables):
            yield f"latent.{nm}", t

    def forward(self, batch, training=False, rng=None):
        ids = _ids_of(batch)
        self._check_ids(ids)
        B = ids.shape[0]
        E = embed(ids, self.latent)  # [B, n, d]
        s = nx.reduce(E, axis=1)
        sq = nx.reduce(nx.mul(E, E), axis=1)
        pair = nx.scale(nx.reduce(nx.sub(nx.mul(s, s), sq), axis=1), 0.5)
        z = nx.add(nx.reshape(self.linear_logit(ids), (B,)), pair)
        return nx.sigmoid(z)


MODEL_KINDS = {"dcap": DCAP, "lr": LogisticRegression, "fm": FactorizationMachine}


def build_model(kind: str, config: DcapConfig, rng=None) -> Model:
    try:
        cls = MODEL_KINDS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown model kind {kind!r}; choose from {sorted(MODEL_KINDS)}") from None
    return cls(config, rng)


# ------------------------------------------------------------ objectives


def logloss(probs: nx.Tensor, labels) -> nx.Tensor:
    """Mean binary cross-entropy with probabilities clamped to [eps, 1 - eps]."""
    y = np.asarray(labels, dtype=np.float64).reshape(probs.shape)
    if y.size == 0:
        raise ContractError("logloss of an empty batch")
    p = nx.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    one_minus = nx.sub(nx.Tensor(np.ones(p.shape)), p)
    ll = nx.add(nx.mul(nx.Tensor(y), nx.log(p)), nx.mul(nx.Tensor(1.0 - y), nx.log(one_minus)))
    return nx.scale(nx.reduce(ll, axis=0, kind="mean"), -1.0)


def logloss_value(probs, labels) -> float:
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(labels, dtype=np.float64)
    if y.size == 0:
        raise ContractError("logloss of an empty batch")
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def objective(loss: nx.Tensor, params, lam: float) -> nx.Tensor:
    """loss + lam * sum of squared parameter entries."""
    if lam < 0:
        raise ContractError("regularisation weight must be >= 0")
    if lam == 0:
        return loss
    total = loss
    for p in params:
        flat = nx.reshape(p, (p.data.size,))
        total = nx.add(total, nx.scale(nx.reduce(nx.mul(flat, flat), axis=0), lam))
    return total


# ----------------------------------------------------------- checkpoints


def save_checkpoint(model: Model, path, metadata=None) -> None:
    """Write ``DCAPCK1``: magic, u8 version, u32-length JSON config block,
    u32 block count, then per parameter a u16-length name, u8 rank, u32
    extents and little-endian float64 data; trailing CRC32.
    """
    header = {"model": model.kind, "config": model.config.to_dict(), "metadata": metadata or {}}
    cfg = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<BI", CHECKPOINT_VERSION, len(cfg)) + cfg
    named = list(model.named_parameters())
    buf += struct.pack("<I", len(named))
    for name, p in named:
        nb = name.encode("utf-8")
        buf += struct.pack("<H", len(nb)) + nb
        buf += struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape)
        buf += p.data.astype("<f8").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path):
    """Rebuild the model stored at ``path``; returns ``(model, metadata)``.

    Nothing is constructed until the whole file has been validated.
    """
    raw = Path(path).read_bytes()
    m = len(CHECKPOINT_MAGIC)
    if len(raw) < m + 9 or raw[:m] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint header")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    version, cfg_len = struct.unpack_from("<BI", body, m)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = m + 5
    try:
        header = json.loads(body[pos:pos + cfg_len].decode("utf-8"))
        pos += cfg_len
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        blocks = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + ln].decode("utf-8")
            pos += ln
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            size = int(np.prod(shape))
            blocks[name] = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
        if pos != len(body):
            raise CheckpointError(f"{path}: {len(body) - pos} trailing bytes")
        config = DcapConfig.from_dict(header["config"])
        model = build_model(header["model"], config)
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    named = dict(model.named_parameters())
    if set(named) != set(blocks):
        raise CheckpointError(f"{path}: parameter names do not match a {header['model']} model")
    for name, p in named.items():
        if blocks[name].shape != p.shape:
            raise CheckpointError(f"{path}: {name} has shape {blocks[name].shape}, expected {p.shape}")
    for name, p in named.items():
        p.data = blocks[name]
    return model, header.get("metadata", {})
