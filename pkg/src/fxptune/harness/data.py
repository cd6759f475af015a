"""Dataset ingestion: IDX files (MNIST layout) and a seeded synthetic generator."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

_IDX_DTYPES = {0x08: np.dtype("u1"), 0x09: np.dtype("i1"), 0x0B: np.dtype(">i2"),
               0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}


class IDXFormatError(ValueError):
    pass


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def parse_idx(buf: bytes, expected_magic: int | None = None) -> np.ndarray:
    """Decode an IDX buffer (big-endian header, row-major payload)."""
    if len(buf) < 4:
        raise IDXFormatError(f"offset 0: need 4 header bytes, file has {len(buf)}")
    magic = struct.unpack(">I", buf[:4])[0]
    if expected_magic is not None and magic != expected_magic:
        raise IDXFormatError(f"offset 0: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 16 != 0 or (magic >> 8) & 0xFF not in _IDX_DTYPES:
        raise IDXFormatError(f"offset 0: invalid IDX magic 0x{magic:08x}")
    dtype = _IDX_DTYPES[(magic >> 8) & 0xFF]
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(buf) < header_end:
        raise IDXFormatError(f"offset 4: need {header_end} header bytes for {ndim} dims, file has {len(buf)}")
    dims = struct.unpack(f">{ndim}I", buf[4:header_end])
    expected = header_end + int(np.prod(dims)) * dtype.itemsize
    if len(buf) != expected:
        raise IDXFormatError(
            f"offset {header_end}: expected {expected} bytes for dims {dims}, got {len(buf)}"
        )
    return np.frombuffer(buf, dtype=dtype, offset=header_end).reshape(dims)


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    try:
        return parse_idx(_read_bytes(path), expected_magic)
    except IDXFormatError as e:
        raise IDXFormatError(f"{path}: {e}") from None


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (used for fixtures and exports)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    num_classes: int
    name: str = ""

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.train_x.shape[1:]


@dataclass
class DatasetSpec:
    name: str = "synthetic"
    n_train: int = 12000
    n_val: int = 5000
    seed: int = 0
    num_classes: int = 10
    image_size: int = 16
    noise: float = 0.2
    # idx only
    train_images: str | None = None
    train_labels: str | None = None
    val_images: str | None = None
    val_labels: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> DatasetSpec:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown dataset keys {sorted(unknown)}")
        return cls(**d)


def normalize(train: np.ndarray, *others: np.ndarray):
    """Scale to unit range and remove the mean, using training statistics only."""
    lo, hi = float(train.min()), float(train.max())
    scale = 1.0 / (hi - lo) if hi > lo else 1.0
    mean = float(((train - lo) * scale).mean())
    out = [(a.astype(np.float64) - lo) * scale - mean for a in (train,) + others]
    return out


def synthetic_blobs(n: int, seed: int, num_classes: int = 10, size: int = 16, noise: float = 0.2):
    """Gaussian-bump class templates rendered as ``size x size`` images.

    Each class is three bumps at class-specific positions; every sample
    jitters positions and amplitudes, adds one random distractor bump and
    pixel noise. Returns raw float images (N, 1, size, size) and labels.
    """
    rng = np.random.default_rng(seed)
    lo, hi = 0.2 * size, 0.8 * size
    centers = rng.uniform(lo, hi, size=(num_classes, 3, 2))
    widths = rng.uniform(0.08 * size, 0.14 * size, size=(num_classes, 3))
    labels = rng.integers(0, num_classes, size=n)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    c = centers[labels] + rng.normal(scale=0.05 * size, size=(n, 3, 2))
    s = widths[labels] * rng.uniform(0.85, 1.15, size=(n, 3))
    amp = rng.uniform(0.6, 1.2, size=(n, 3))
    d2 = (yy[None, None] - c[..., 0, None, None]) ** 2 + (xx[None, None] - c[..., 1, None, None]) ** 2
    images = (amp[..., None, None] * np.exp(-d2 / (2 * s[..., None, None] ** 2))).sum(axis=1)

    dc = rng.uniform(0, size, size=(n, 2))
    damp = rng.uniform(0.0, 0.6, size=n)
    d2 = (yy[None] - dc[:, 0, None, None]) ** 2 + (xx[None] - dc[:, 1, None, None]) ** 2
    images += damp[:, None, None] * np.exp(-d2 / (2 * (0.1 * size) ** 2))
    images += rng.normal(scale=noise, size=images.shape)
    return images[:, None], labels


def load_dataset(spec: DatasetSpec) -> Dataset:
    if spec.name == "synthetic":
        x, y = synthetic_blobs(spec.n_train + spec.n_val, spec.seed, spec.num_classes, spec.image_size, spec.noise)
        tx, vx = normalize(x[: spec.n_train], x[spec.n_train :])
        return Dataset(tx, y[: spec.n_train], vx, y[spec.n_train :], spec.num_classes, "synthetic")
    if spec.name == "idx":
        paths = (spec.train_images, spec.train_labels, spec.val_images, spec.val_labels)
        if any(p is None for p in paths):
            raise ValueError("idx dataset needs train/val image and label paths")
        tx = read_idx(spec.train_images, IDX_IMAGES_MAGIC)
        ty = read_idx(spec.train_labels, IDX_LABELS_MAGIC)
        vx = read_idx(spec.val_images, IDX_IMAGES_MAGIC)
        vy = read_idx(spec.val_labels, IDX_LABELS_MAGIC)
        if len(tx) != len(ty) or len(vx) != len(vy):
            raise IDXFormatError("image and label counts differ")
        tx, vx = tx[: spec.n_train], vx[: spec.n_val]
        ty, vy = ty[: spec.n_train].astype(np.int64), vy[: spec.n_val].astype(np.int64)
        tx, vx = normalize(tx[:, None], vx[:, None])
        return Dataset(tx, ty, vx, vy, spec.num_classes, "idx")
    raise ValueError(f"unknown dataset {spec.name!r}")
