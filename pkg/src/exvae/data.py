"""IDX (MNIST-format) ingestion, dynamic binarization and seeded splits."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError, ContractError, DomainError, FormatError, LengthError

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray            # N x d_x, values in [0, 1]
    labels: np.ndarray | None = None
    split: str = "train"
    shape: tuple[int, int] = (28, 28)

    def __post_init__(self):
        x = np.asarray(self.images)
        if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] == 0:
            raise ContractError(f"images must be a non-empty N x d matrix, got shape {x.shape}")
        if x.min() < 0.0 or x.max() > 1.0:
            raise DomainError("pixel values must lie in [0, 1]")
        if not np.isfinite(x).all():
            raise DomainError("pixel values must be finite")
        if self.labels is not None and len(self.labels) != x.shape[0]:
            raise ConsistencyError(f"{len(self.labels)} labels for {x.shape[0]} images")
        object.__setattr__(self, "images", x)
        if self.labels is not None:
            object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))

    def __len__(self):
        return self.images.shape[0]

    @property
    def dim(self) -> int:
        return self.images.shape[1]

    def subset(self, idx, split: str | None = None) -> "LabeledDataset":
        idx = np.asarray(idx)
        labels = None if self.labels is None else self.labels[idx].copy()
        return LabeledDataset(self.images[idx].copy(), labels, split or self.split, self.shape)


def parse_idx(image_bytes: bytes, label_bytes: bytes | None = None, split: str = "train") -> LabeledDataset:
    """Decode an IDX image file (and optional label file) into a dataset.

    Pixels are scaled by 1/255 so that 0 and 255 map exactly to 0.0 and 1.0.
    """
    if len(image_bytes) < 8:
        raise LengthError("image file shorter than its header")
    magic, count = struct.unpack_from(">II", image_bytes, 0)
    if magic != IMAGE_MAGIC:
        raise FormatError(f"bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")
    if len(image_bytes) < 16:
        raise LengthError("image file shorter than its header")
    rows, cols = struct.unpack_from(">II", image_bytes, 8)
    expected = 16 + count * rows * cols
    if len(image_bytes) != expected:
        raise LengthError(f"image payload is {len(image_bytes) - 16} bytes, header declares {count * rows * cols}")
    pix = np.frombuffer(image_bytes, dtype=np.uint8, offset=16).reshape(count, rows * cols)
    images = pix.astype(np.float64) / 255.0

    labels = None
    if label_bytes is not None:
        if len(label_bytes) < 8:
            raise LengthError("label file shorter than its header")
        lmagic, lcount = struct.unpack_from(">II", label_bytes, 0)
        if lmagic != LABEL_MAGIC:
            raise FormatError(f"bad label magic {lmagic:#010x}, expected {LABEL_MAGIC:#010x}")
        if len(label_bytes) != 8 + lcount:
            raise LengthError(f"label payload is {len(label_bytes) - 8} bytes, header declares {lcount}")
        if lcount != count:
            raise ConsistencyError(f"image count {count} != label count {lcount}")
        labels = np.frombuffer(label_bytes, dtype=np.uint8, offset=8).astype(np.int64)
    return LabeledDataset(images, labels, split, (rows, cols))


def serialize_idx(ds: LabeledDataset) -> tuple[bytes, bytes | None]:
    """Inverse of :func:`parse_idx` for datasets whose pixels are multiples of 1/255."""
    rows, cols = ds.shape
    if rows * cols != ds.dim:
        raise ContractError(f"image shape {ds.shape} does not match d_x={ds.dim}")
    pix = np.rint(ds.images * 255.0).astype(np.uint8)
    img = struct.pack(">IIII", IMAGE_MAGIC, len(ds), rows, cols) + pix.tobytes()
    lab = None
    if ds.labels is not None:
        lab = struct.pack(">II", LABEL_MAGIC, len(ds)) + np.asarray(ds.labels, dtype=np.uint8).tobytes()
    return img, lab


def _read(path: str | os.PathLike) -> bytes:
    path = os.fspath(path)
    try:
        if path.endswith(".gz"):
            with gzip.open(path, "rb") as fh:
                return fh.read()
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc


def load_idx(image_path, label_path=None, split: str = "train") -> LabeledDataset:
    """Read IDX files from disk; ``.gz`` files are decompressed transparently."""
    return parse_idx(_read(image_path), None if label_path is None else _read(label_path), split)


def write_idx(ds: LabeledDataset, image_path, label_path=None) -> None:
    img, lab = serialize_idx(ds)
    for path, payload in ((image_path, img), (label_path, lab)):
        if path is None or payload is None:
            continue
        path = os.fspath(path)
        if path.endswith(".gz"):
            payload = gzip.compress(payload, mtime=0)
        with open(path, "wb") as fh:
            fh.write(payload)


def dynamic_binarize(batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Resample every pixel as an independent Bernoulli draw with p = pixel value."""
    batch = np.asarray(batch)
    if batch.size and (batch.min() < 0.0 or batch.max() > 1.0):
        raise DomainError("dynamic_binarize expects values in [0, 1]")
    u = rng.random(batch.shape)
    return (u < batch).astype(batch.dtype if batch.dtype.kind == "f" else np.float64)


def split(ds: LabeledDataset, sizes: tuple[int, ...], seed: int) -> tuple[LabeledDataset, ...]:
    """Seeded random partition of ``ds`` into consecutive chunks of ``sizes``."""
    sizes = tuple(int(s) for s in sizes)
    if any(s < 0 for s in sizes) or sum(sizes) > len(ds):
        raise ContractError(f"split sizes {sizes} exceed dataset size {len(ds)}")
    if sum(sizes) != len(ds):
        raise ContractError(f"split sizes {sizes} must sum to {len(ds)}")
    names = ("train", "valid", "test") if len(sizes) == 3 else tuple(f"part{i}" for i in range(len(sizes)))
    return tuple(ds.subset(idx, split=name) for name, idx in zip(names, split_indices(len(ds), sizes, seed)))


def split_indices(n: int, sizes: tuple[int, ...], seed: int) -> list[np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.cumsum((0,) + tuple(sizes))
    return [np.sort(perm[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
