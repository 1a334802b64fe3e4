"""Run configuration: dataclasses, the key = value file format and seed substreams."""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, fields
from typing import Any

import numpy as np

from .errors import ConfigError


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for component ``name`` derived from the root seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def substream_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)[0])


@dataclass
class TrainConfig:
    seed: int
    d_z: int = 40
    hidden: int = 300
    batch_size: int = 100
    lr: float = 5e-4
    subsample_ratio: float = 0.5     # M / N
    k_neighbors: int = 10            # 0 disables kNN truncation
    anneal_epochs: int = 100
    patience: int = 50
    max_epochs: int = 2000
    prior: str = "exemplar"          # exemplar | gaussian
    loo: bool = True
    knn_mode: str = "within"         # within: kNN inside pi; filter: global kNN then intersect with pi
    knn_query: str = "mean"          # mean | z
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.seed is None:
            raise ConfigError("seed required")
        if not 0.0 < self.subsample_ratio <= 1.0:
            raise ConfigError(f"subsample_ratio must be in (0, 1], got {self.subsample_ratio}")
        for key in ("d_z", "hidden", "batch_size", "max_epochs", "anneal_epochs"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        if self.k_neighbors < 0:
            raise ConfigError(f"k_neighbors must be >= 0, got {self.k_neighbors}")
        if self.patience < 0:
            raise ConfigError(f"patience must be >= 0, got {self.patience}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.prior not in ("exemplar", "gaussian"):
            raise ConfigError(f"prior must be 'exemplar' or 'gaussian', got {self.prior!r}")
        if self.knn_mode not in ("within", "filter"):
            raise ConfigError(f"knn_mode must be 'within' or 'filter', got {self.knn_mode!r}")
        if self.knn_query not in ("mean", "z"):
            raise ConfigError(f"knn_query must be 'mean' or 'z', got {self.knn_query!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def subset_size(self, n: int) -> int:
        """M for a pool of ``n`` exemplars; a ratio of 1 means every candidate."""
        pool = n - 1 if self.loo else n
        if self.subsample_ratio >= 1.0:
            return pool
        return max(1, min(pool, int(round(self.subsample_ratio * n))))


@dataclass
class AugConfig:
    seed: int
    lam: float = 0.4
    smoothing: float = 0.1
    hidden: int = 1024
    lr: float = 5e-4
    batch_size: int = 100
    epochs: int = 100
    union: bool = False              # retrain on train + valid

    def __post_init__(self):
        if self.seed is None:
            raise ConfigError("seed required")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must be in [0, 1], got {self.lam}")
        if not 0.0 <= self.smoothing <= 1.0:
            raise ConfigError(f"smoothing must be in [0, 1], got {self.smoothing}")
        if self.hidden < 1 or self.batch_size < 1 or self.epochs < 1 or self.lr <= 0:
            raise ConfigError("hidden, batch_size, epochs and lr must be positive")


def _coerce(raw: str, typ) -> Any:
    typ = typ if isinstance(typ, type) else {"int": int, "float": float, "bool": bool, "str": str}.get(
        str(typ).split("|")[0].strip(), str)
    if typ is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return typ(raw.strip())


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def build(cls, values: dict[str, Any], extra: set[str] = frozenset()):
    """Instantiate dataclass ``cls`` from string/typed values, rejecting unknown keys
    except those listed in ``extra`` (returned separately)."""
    known = {f.name: f for f in fields(cls)}
    kwargs, rest = {}, {}
    for key, value in values.items():
        if key in known:
            if value is None:
                continue
            try:
                kwargs[key] = _coerce(value, known[key].type) if isinstance(value, str) else value
            except ValueError as exc:
                raise ConfigError(f"invalid value for {key}: {exc}") from None
        elif key in extra:
            rest[key] = value
        else:
            raise ConfigError(f"unknown config key: {key}")
    if "seed" not in kwargs:
        raise ConfigError("seed required")
    return cls(**kwargs), rest


def to_dict(cfg) -> dict[str, Any]:
    return dataclasses.asdict(cfg)
