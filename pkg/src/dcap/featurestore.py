"""Ingestion: vocabularies, numeric bucketing, label binarisation, splits.

Raw records become an :class:`EncodedDataset`, a pair of arrays
(``ids[N, n]`` per-field indices and ``labels[N]``) plus one
:class:`FieldSchema` per field. Indices are per-field: field ``i`` indexes
its own embedding table.
"""
from __future__ import annotations

import logging
import math
import struct
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import DatasetCacheError, EmptyDatasetError, FeatureIndexError, MalformedRecordError

log = logging.getLogger(__name__)

UNKNOWN = "<unknown>"
MOVIELENS_FIELDS = ("UserID", "MovieID", "Gender", "Age", "Occupation")
MOVIELENS_TABLE1_DIMENSION = 10072
MIN_FREQUENCY = {"criteo": 10, "avazu": 4, "movielens": 1}

CACHE_MAGIC = b"DCAPDS1"
CACHE_VERSION = 1


@dataclass
class FieldSchema:
    name: str
    kind: str  # "categorical" or "numerical"
    vocabulary: dict[str, int]
    unknown_index: int

    def __post_init__(self):
        if self.kind not in ("categorical", "numerical"):
            raise ValueError(f"unknown field kind {self.kind!r}")
        self._inverse = None

    @property
    def size(self) -> int:
        return len(self.vocabulary) + 1

    def encode(self, token) -> int:
        if token is None:
            return self.unknown_index
        return self.vocabulary.get(str(token), self.unknown_index)

    def decode(self, index: int) -> str:
        if self._inverse is None:
            self._inverse = {v: k for k, v in self.vocabulary.items()}
        if index == self.unknown_index:
            return UNKNOWN
        try:
            return self._inverse[index]
        except KeyError:
            raise FeatureIndexError(f"index {index} outside field {self.name!r}") from None

    def tokens(self) -> list[str]:
        """Tokens in index order, unknown slot excluded."""
        return sorted(self.vocabulary, key=self.vocabulary.__getitem__)


@dataclass(frozen=True)
class EncodedSample:
    feature_ids: tuple
    label: int


@dataclass
class EncodedDataset:
    ids: np.ndarray  # int64 [N, n]
    labels: np.ndarray  # int8 [N]
    schemas: list

    def __post_init__(self):
        self.ids = np.ascontiguousarray(self.ids, dtype=np.int64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int8)
        if self.ids.ndim != 2 or self.ids.shape[0] != self.labels.shape[0]:
            raise ValueError(f"ids {self.ids.shape} and labels {self.labels.shape} disagree")
        if self.ids.shape[1] != len(self.schemas):
            raise ValueError(f"{self.ids.shape[1]} id columns for {len(self.schemas)} fields")

    def __len__(self):
        return self.ids.shape[0]

    def __getitem__(self, i) -> EncodedSample:
        return EncodedSample(tuple(int(v) for v in self.ids[i]), int(self.labels[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def n_fields(self):
        return len(self.schemas)

    @property
    def field_names(self):
        return [s.name for s in self.schemas]

    @property
    def vocab_sizes(self):
        return [s.size for s in self.schemas]

    @property
    def dimension(self):
        """Total feature dimension (sum of vocabulary sizes incl. unknown slots)."""
        return sum(self.vocab_sizes)

    def subset(self, index) -> "EncodedDataset":
        return EncodedDataset(self.ids[index], self.labels[index], self.schemas)

    @classmethod
    def from_samples(cls, samples: Sequence[EncodedSample], schemas) -> "EncodedDataset":
        ids = np.array([s.feature_ids for s in samples], dtype=np.int64).reshape(len(samples), len(schemas))
        labels = np.array([s.label for s in samples], dtype=np.int8)
        return cls(ids, labels, list(schemas))


@dataclass
class DatasetSplit:
    train: EncodedDataset
    validation: EncodedDataset
    test: EncodedDataset
    seed: int
    indices: dict = field(default_factory=dict)

    def part(self, name: str) -> EncodedDataset:
        if name in ("val", "valid"):
            name = "validation"
        return getattr(self, name)


# ------------------------------------------------------------------ rules


def build_vocabulary(records: Iterable[Mapping], field: str, min_frequency: int = 1,
                     kind: str = "categorical") -> FieldSchema:
    """Vocabulary of one field; tokens rarer than ``min_frequency`` go to unknown.

    Numerical raw values are bucketed with :func:`transform_numeric` before
    counting. Indices follow lexicographic token order, unknown last.
    """
    if min_frequency < 1:
        raise ValueError("min_frequency must be >= 1")
    counts: Counter = Counter()
    seen = 0
    for rec in records:
        seen += 1
        tok = rec[field]
        if kind == "numerical":
            tok = numeric_token(tok)
        if tok is not None:
            counts[str(tok)] += 1
    if seen == 0:
        raise EmptyDatasetError(f"no records to build vocabulary for field {field!r}")
    return schema_from_counts(field, counts, min_frequency, kind)


def schema_from_counts(name: str, counts: Mapping[str, int], min_frequency: int,
                       kind: str = "categorical") -> FieldSchema:
    kept = sorted(tok for tok, c in counts.items() if c >= min_frequency and tok != UNKNOWN)
    vocab = {tok: i for i, tok in enumerate(kept)}
    return FieldSchema(name, kind, vocab, len(vocab))


def transform_numeric(z: float) -> int:
    """Bucket a non-negative value: floor(ln(z)^2) above 2, floor(z) otherwise."""
    if z > 2:
        return int(math.floor(math.log(z) ** 2))
    return max(int(math.floor(z)), 0)


def numeric_token(raw):
    """Raw numeric cell to bucket token; missing or unparseable gives None."""
    if raw is None:
        return None
    try:
        z = float(raw)
    except (TypeError, ValueError):
        return None
    if not math.isfinite(z):
        return None
    return str(transform_numeric(z))


def binarize_rating(rating: int) -> int:
    r = int(rating)
    if not 1 <= r <= 5 or r != rating:
        raise MalformedRecordError(f"rating {rating!r} outside 1..5")
    return 1 if r >= 4 else 0


def split_dataset(samples: EncodedDataset, seed: int) -> DatasetSplit:
    """Shuffle under ``seed``; first 80% train, remainder halved into validation/test."""
    n = len(samples)
    if n < 10:
        raise EmptyDatasetError(f"need at least 10 samples to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = (8 * n) // 10
    n_val = (n - n_train) // 2
    tr, va, te = perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]
    return DatasetSplit(
        samples.subset(tr), samples.subset(va), samples.subset(te), seed,
        {"train": tr, "validation": va, "test": te},
    )


def minibatches(n_samples, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    """Index blocks covering ``range(n)`` exactly once, reshuffled per (seed, epoch)."""
    if not isinstance(n_samples, (int, np.integer)):
        n_samples = len(n_samples)
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = np.random.default_rng([int(seed), int(epoch)]).permutation(int(n_samples))
    for start in range(0, n_samples, batch_size):
        yield perm[start:start + batch_size]


# ----------------------------------------------------------------- loaders


@dataclass
class LoadReport:
    instances: int
    fields: int
    dimension: int
    skipped: int = 0
    notes: list = field(default_factory=list)

    def stats_line(self) -> str:
        return f"instances={self.instances} fields={self.fields} dimension={self.dimension}"


def _encode_columns(columns: Sequence[list], names, kinds, min_frequency) -> list[FieldSchema]:
    schemas = []
    for col, name, kind in zip(columns, names, kinds):
        counts = Counter(t for t in col if t is not None)
        schemas.append(schema_from_counts(name, counts, min_frequency, kind))
    return schemas


def _encode(columns, schemas, labels) -> EncodedDataset:
    n = len(labels)
    ids = np.empty((n, len(schemas)), dtype=np.int64)
    for k, (col, sch) in enumerate(zip(columns, schemas)):
        voc, unk = sch.vocabulary, sch.unknown_index
        ids[:, k] = [unk if t is None else voc.get(t, unk) for t in col]
    return EncodedDataset(ids, np.asarray(labels, dtype=np.int8), schemas)


def load_movielens(ratings_path, users_path, movies_path, min_frequency: int = 1):
    """Read the MovieLens-1M ``::`` files into a 5-field dataset.

    Returns ``(dataset, report)``. Lines that fail to parse are skipped and
    counted; an unreadable file raises ``FileNotFoundError`` naming it.
    """
    paths = {"ratings": Path(ratings_path), "users": Path(users_path), "movies": Path(movies_path)}
    for label, p in paths.items():
        if not p.is_file():
            raise FileNotFoundError(f"MovieLens {label} file not found: {p}")

    skipped = 0
    users = {}
    with open(paths["users"], encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\r\n").split("::")
            if len(parts) < 4 or not parts[0]:
                skipped += 1
                log.warning("users: skipping malformed line %d", lineno)
                continue
            users[parts[0]] = (parts[1], parts[2], parts[3])

    movies = set()
    with open(paths["movies"], encoding="latin-1") as fh:
        for line in fh:
            parts = line.split("::", 1)
            if parts and parts[0].strip():
                movies.add(parts[0].strip())

    cols = [[] for _ in MOVIELENS_FIELDS]
    labels = []
    unknown_movies = 0
    with open(paths["ratings"], encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\r\n").split("::")
            try:
                if len(parts) != 4:
                    raise MalformedRecordError("expected 4 fields")
                uid, mid, rating = parts[0], parts[1], int(parts[2])
                label = binarize_rating(rating)
                gender, age, occ = users[uid]
            except (MalformedRecordError, ValueError, KeyError) as exc:
                skipped += 1
                if skipped <= 20:
                    log.warning("ratings: skipping line %d (%s)", lineno, exc)
                continue
            if mid not in movies:
                unknown_movies += 1
            for col, tok in zip(cols, (uid, mid, gender, age, occ)):
                col.append(tok)
            labels.append(label)
    if not labels:
        raise EmptyDatasetError(f"no usable ratings in {paths['ratings']}")
    if skipped:
        log.warning("skipped %d malformed MovieLens lines", skipped)

    schemas = _encode_columns(cols, MOVIELENS_FIELDS, ["categorical"] * 5, min_frequency)
    data = _encode(cols, schemas, labels)
    report = LoadReport(len(data), data.n_fields, data.dimension, skipped)
    if unknown_movies:
        report.notes.append(f"{unknown_movies} ratings reference movies absent from movies.dat")
    if report.dimension != MOVIELENS_TABLE1_DIMENSION:
        msg = (f"feature dimension {report.dimension} differs from the reference "
               f"{MOVIELENS_TABLE1_DIMENSION}")
        report.notes.append(msg)
        log.info(msg)
    return data, report


def read_schema_file(path) -> list[tuple[str, str]]:
    """Parse a schema side-file: one ``name kind`` pair per line.

    Kinds: ``label``, ``categorical``, ``numerical``, ``skip``. Blank lines
    and ``#`` comments are ignored. Column order matches the data file.
    """
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2 or parts[1] not in ("label", "categorical", "numerical", "skip"):
                raise MalformedRecordError(f"{path}:{lineno}: expected '<name> <kind>'")
            out.append((parts[0], parts[1]))
    if sum(k == "label" for _, k in out) != 1:
        raise MalformedRecordError(f"{path}: exactly one label column required")
    return out


def load_delimited(data_path, schema, delimiter="\t", header=False, min_frequency=1,
                   max_rows=None):
    """Generic Criteo/Avazu-style ingestion driven by a schema side-file.

    ``schema`` is a path or the parsed list of ``(name, kind)`` pairs.
    Empty cells are missing values and encode to the field's unknown slot.
    """
    if not isinstance(schema, list):
        schema = read_schema_file(schema)
    label_col = next(i for i, (_, k) in enumerate(schema) if k == "label")
    feat = [(i, name, kind) for i, (name, kind) in enumerate(schema) if kind in ("categorical", "numerical")]
    cols = [[] for _ in feat]
    labels = []
    skipped = 0
    data_path = Path(data_path)
    if not data_path.is_file():
        raise FileNotFoundError(f"data file not found: {data_path}")
    opener = open
    if data_path.suffix == ".gz":
        import gzip
        opener = gzip.open
    with opener(data_path, "rt", encoding="utf-8", errors="replace") as fh:
        if header:
            next(fh, None)
        for lineno, line in enumerate(fh, 2 if header else 1):
            if max_rows is not None and len(labels) >= max_rows:
                break
            parts = line.rstrip("\r\n").split(delimiter)
            if len(parts) != len(schema):
                skipped += 1
                if skipped <= 20:
                    log.warning("%s:%d: expected %d columns, got %d", data_path, lineno, len(schema), len(parts))
                continue
            try:
                y = int(float(parts[label_col]))
                if y not in (0, 1):
                    raise ValueError
            except ValueError:
                skipped += 1
                continue
            labels.append(y)
            for col, (i, _, kind) in zip(cols, feat):
                raw = parts[i]
                if raw == "":
                    col.append(None)
                elif kind == "numerical":
                    col.append(numeric_token(raw))
                else:
                    col.append(raw)
    if not labels:
        raise EmptyDatasetError(f"no usable rows in {data_path}")
    schemas = _encode_columns(cols, [n for _, n, _ in feat], [k for _, _, k in feat], min_frequency)
    data = _encode(cols, schemas, labels)
    return data, LoadReport(len(data), data.n_fields, data.dimension, skipped)


def make_synthetic(n_samples=2000, vocab_sizes=(8, 8, 6, 5), seed=0, interaction=3.0):
    """Random categorical data whose label depends on a planted pairwise interaction.

    The logit is a small first-order term plus ``interaction * u[f0] * v[f1]``,
    so a model without second-order terms cannot fit it fully.
    """
    rng = np.random.default_rng(seed)
    n = len(vocab_sizes)
    ids = np.stack([rng.integers(0, v, n_samples) for v in vocab_sizes], axis=1)
    first = [rng.normal(scale=0.3, size=v) for v in vocab_sizes]
    u = rng.choice([-1.0, 1.0], size=vocab_sizes[0])
    w = rng.choice([-1.0, 1.0], size=vocab_sizes[1])
    logit = sum(first[k][ids[:, k]] for k in range(n)) + interaction * u[ids[:, 0]] * w[ids[:, 1]]
    labels = (rng.random(n_samples) < 1.0 / (1.0 + np.exp(-logit))).astype(np.int8)
    schemas = [
        FieldSchema(f"f{k}", "categorical", {f"v{j:03d}": j for j in range(v)}, v)
        for k, v in enumerate(vocab_sizes)
    ]
    return EncodedDataset(ids, labels, schemas)


# ------------------------------------------------------------------- cache


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def save_cache(data: EncodedDataset, path) -> None:
    """Write the prepared-dataset cache (``DCAPDS1``).

    Layout, all integers little-endian: magic, u8 version, u32 field count;
    per field a u32-length-prefixed UTF-8 name, u8 kind (0 categorical,
    1 numerical), u32 vocabulary size without the unknown slot, u32 unknown
    index, then every token in index order; u64 sample count, int32 ids
    ``[N, n]`` row-major, u8 labels ``[N]``; trailing CRC32 of all previous bytes.
    """
    buf = bytearray(CACHE_MAGIC)
    buf += struct.pack("<BI", CACHE_VERSION, data.n_fields)
    for sch in data.schemas:
        buf += _pack_str(sch.name)
        buf += struct.pack("<BII", 0 if sch.kind == "categorical" else 1, len(sch.vocabulary), sch.unknown_index)
        for tok in sch.tokens():
            buf += _pack_str(tok)
    buf += struct.pack("<Q", len(data))
    buf += data.ids.astype("<i4").tobytes()
    buf += data.labels.astype("u1").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    Path(path).write_bytes(bytes(buf))


def load_cache(path) -> EncodedDataset:
    raw = Path(path).read_bytes()
    if len(raw) < len(CACHE_MAGIC) + 9 or raw[:len(CACHE_MAGIC)] != CACHE_MAGIC:
        raise DatasetCacheError(f"{path}: not a DCAPDS1 cache")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise DatasetCacheError(f"{path}: checksum mismatch (truncated or corrupted)")
    pos = len(CACHE_MAGIC)
    version, n_fields = struct.unpack_from("<BI", body, pos)
    pos += 5
    if version != CACHE_VERSION:
        raise DatasetCacheError(f"{path}: unsupported cache version {version}")

    def read_str():
        nonlocal pos
        (ln,) = struct.unpack_from("<I", body, pos)
        pos += 4
        s = body[pos:pos + ln].decode("utf-8")
        pos += ln
        return s

    schemas = []
    for _ in range(n_fields):
        name = read_str()
        kind, size, unk = struct.unpack_from("<BII", body, pos)
        pos += 9
        vocab = {read_str(): i for i in range(size)}
        schemas.append(FieldSchema(name, "categorical" if kind == 0 else "numerical", vocab, unk))
    (n,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    ids = np.frombuffer(body, dtype="<i4", count=n * n_fields, offset=pos).reshape(n, n_fields)
    pos += 4 * n * n_fields
    labels = np.frombuffer(body, dtype="u1", count=n, offset=pos)
    return EncodedDataset(ids.astype(np.int64), labels.astype(np.int8), schemas)
