"""Dataset ingestion: IDX binary files and a deterministic synthetic task."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "IdxFormatError",
    "Dataset",
    "load_idx",
    "write_idx",
    "load_idx_dataset",
    "synth_dataset",
    "split_dataset",
    "batches",
]

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v.newbyteorder("="): k for k, v in _IDX_DTYPES.items()}


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Images in [0, 1] as float64 [N, C, H, W] plus integer labels [N]."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError("images must be [N, C, H, W]")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("labels must align with images")

    def __len__(self) -> int:
        return self.images.shape[0]


def load_idx(path: str) -> np.ndarray:
    """Parse one IDX file (magic, dims, big-endian extents, raw data)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    zero0, zero1, dtype_code, ndim = struct.unpack(">BBBB", raw[:4])
    if zero0 != 0 or zero1 != 0:
        raise IdxFormatError(f"{path}: bad magic bytes {raw[:2]!r}")
    if dtype_code not in _IDX_DTYPES:
        raise IdxFormatError(f"{path}: unknown dtype code 0x{dtype_code:02x}")
    if ndim < 1:
        raise IdxFormatError(f"{path}: dimension count must be >= 1")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IdxFormatError(f"{path}: truncated dimension list")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    dtype = _IDX_DTYPES[dtype_code]
    expected = header_len + int(np.prod(dims)) * dtype.itemsize
    if len(raw) != expected:
        raise IdxFormatError(
            f"{path}: size mismatch, header declares {expected} bytes, file has {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype, offset=header_len)
    return data.reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path: str, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array)
    native = arr.dtype.newbyteorder("=")
    if native not in _IDX_CODES:
        raise IdxFormatError(f"dtype {arr.dtype} has no IDX code")
    code = _IDX_CODES[native]
    with open(path, "wb") as f:
        f.write(struct.pack(">BBBB", 0, 0, code, arr.ndim))
        f.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        f.write(arr.astype(_IDX_DTYPES[code]).tobytes())


def load_idx_dataset(images_path: str, labels_path: str) -> Dataset:
    """Pair an image IDX file with a label file; pixels scaled to [0, 1]."""
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if labels.ndim != 1:
        raise IdxFormatError(f"{labels_path}: labels must be 1-D")
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError("image/label counts differ "
                             f"({images.shape[0]} vs {labels.shape[0]})")
    if images.ndim == 3:
        images = images[:, None, :, :]
    elif images.ndim != 4:
        raise IdxFormatError(f"{images_path}: images must be 3-D or 4-D")
    scale = 255.0 if images.dtype.kind == "u" else 1.0
    return Dataset(images=images.astype(np.float64) / scale,
                   labels=labels.astype(np.int64))


def synth_dataset(seed: int, num_classes: int, n: int, image_size: int = 16,
                  channels: int = 1, noise: float = 0.1) -> Dataset:
    """Procedural labeled images: class template + Gaussian pixel noise.

    Each class gets a blocky random template (4x4 cells upsampled to the
    image size), so classes differ on many pixels by far more than the noise
    floor and the task is Bayes-separable by construction. Labels are
    assigned round-robin (balanced within +-1) and the same seed reproduces
    the dataset bit for bit.
    """
    if n < num_classes:
        raise ValueError("need at least one sample per class")
    if image_size % 4:
        raise ValueError("image_size must be a multiple of 4")
    rng = np.random.Generator(np.random.PCG64(seed))
    cells = rng.uniform(0.1, 0.9, size=(num_classes, channels, 4, 4))
    templates = np.kron(cells, np.ones((1, 1, image_size // 4, image_size // 4)))
    labels = np.arange(n, dtype=np.int64) % num_classes
    images = templates[labels] + rng.normal(0.0, noise,
                                            size=(n, channels, image_size, image_size))
    return Dataset(images=np.clip(images, 0.0, 1.0), labels=labels)


def split_dataset(ds: Dataset, n_train: int) -> tuple[Dataset, Dataset]:
    """Deterministic head/tail split; round-robin labels keep both balanced."""
    if not 0 < n_train < len(ds):
        raise ValueError("n_train must leave a non-empty test split")
    return (Dataset(ds.images[:n_train], ds.labels[:n_train]),
            Dataset(ds.images[n_train:], ds.labels[n_train:]))


def batches(ds: Dataset, batch_size: int,
            rng: np.random.Generator | None = None):
    """One epoch of (images, labels) batches; shuffled when rng is given."""
    n = len(ds)
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], ds.labels[idx]
