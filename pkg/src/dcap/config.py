"""Run configuration: defaults, flat ``key=value`` files, and precedence.

Values resolve as command-line flag > config file > built-in default.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError

DATA_DIR_ENV = "DCAP_DATA_DIR"


@dataclass
class RunConfig:
    data: str = ""
    model: str = "dcap"
    embedding_dim: int = 16
    layers: list = field(default_factory=lambda: [2])
    heads: list = field(default_factory=lambda: [4])
    product: str = "inner"
    hidden: list = field(default_factory=lambda: [100, 100])
    dropout: float = 0.5
    residual: bool = False
    layer_norm: bool = False
    lr: float = 0.001
    weight_decay: float = 1e-6
    decoupled_weight_decay: bool = False
    batch_size: int = 4096
    patience: int = 3
    max_epochs: int = 50
    trials: int = 1
    seed: int = 0
    split_seed: int = 0
    out: str = "runs"

    def hash(self) -> str:
        d = asdict(self)
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_int_list(text) -> list:
    """``"2"``, ``"1,2,4"`` or ``"1..5"`` to a list of ints."""
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    if not out:
        raise ConfigurationError(f"empty integer list {text!r}")
    return out


def _parse_bool(text):
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"not a boolean: {text!r}")


def coerce(key: str, value):
    typ = FIELD_TYPES[key]
    try:
        if typ == "list":
            return parse_int_list(value)
        if typ == "bool":
            return _parse_bool(value)
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        return str(value)
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key}: {value!r}") from exc


def read_config_file(path) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment, dashes equal underscores."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in FIELD_TYPES:
                raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = coerce(key, value)
    return out


def resolve(flags: dict | None = None, config_file=None) -> RunConfig:
    """Merge defaults, then the file, then flags whose value is not None."""
    cfg = RunConfig()
    if config_file:
        for k, v in read_config_file(config_file).items():
            setattr(cfg, k, v)
    for k, v in (flags or {}).items():
        if v is not None and k in FIELD_TYPES:
            setattr(cfg, k, coerce(k, v))
    return cfg


def data_root() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "."))
