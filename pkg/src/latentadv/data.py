"""Datasets (IDX files, synthetic toys), batching and checkpoint files."""

from __future__ import annotations

import gzip
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import Network, build_from_architecture, param_shapes

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class FormatError(ValueError):
    """An input file does not follow its declared format."""


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray  # (N, *sample_shape) in [0, 1]
    labels: np.ndarray  # (N,) int64
    name: str = "dataset"
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.images) and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int | None = None, start: int = 0) -> "Dataset":
        stop = len(self) if n is None else min(len(self), start + n)
        return Dataset(self.images[start:stop], self.labels[start:stop], self.name, self.num_classes)

    def astype(self, dtype) -> "Dataset":
        return Dataset(self.images.astype(dtype), self.labels, self.name, self.num_classes)

    def fingerprint(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()[:16]


# ---------------------------------------------------------------- IDX


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, expected_magic: int, what: str = "file") -> np.ndarray:
    """Parse an unsigned-byte IDX payload into an array of its declared dimensions."""
    if len(raw) < 4:
        raise FormatError(f"{what}: {len(raw)} bytes is too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{what}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{what}: truncated header ({len(raw)} of {header} bytes)")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header != size:
        raise FormatError(f"{what}: payload has {len(raw) - header} bytes, header declares {size}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, name: str | None = None) -> Dataset:
    """Load an IDX image/label pair (plain or gzipped); pixels are scaled by 1/255."""
    for p in (images_path, labels_path):
        if not Path(p).exists():
            raise FileNotFoundError(f"dataset file not found: {p}")
    pixels = parse_idx(_read_bytes(images_path), IMAGE_MAGIC, str(images_path))
    labels = parse_idx(_read_bytes(labels_path), LABEL_MAGIC, str(labels_path))
    if pixels.ndim != 3:
        raise FormatError(f"{images_path}: expected 3 image dimensions, got {pixels.ndim}")
    if len(pixels) != len(labels):
        raise FormatError(f"{len(pixels)} images but {len(labels)} labels")
    images = pixels[:, None, :, :].astype(np.float64) / 255.0
    num_classes = max(10, int(labels.max()) + 1) if len(labels) else 10
    return Dataset(images, labels.astype(np.int64), name or Path(images_path).name, num_classes)


def encode_idx(array: np.ndarray) -> bytes:
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


def write_idx(path, array: np.ndarray) -> None:
    data = encode_idx(array)
    if str(path).endswith(".gz"):
        data = gzip.compress(data, mtime=0)
    Path(path).write_bytes(data)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_mnist_dir(directory, split: str = "train") -> Dataset:
    """Load the standard MNIST file pair for ``split`` from ``directory`` (``.gz`` optional)."""
    directory = Path(directory)
    paths = []
    for stem in MNIST_FILES[split]:
        for candidate in (directory / stem, directory / f"{stem}.gz"):
            if candidate.exists():
                paths.append(candidate)
                break
        else:
            raise FileNotFoundError(f"dataset file not found: {directory / stem}[.gz]")
    return load_idx(*paths, name=f"mnist-{split}")


# ---------------------------------------------------------------- synthetic


def synthetic_two_gaussians(rng: np.random.Generator, n_per_class: int, dim: int = 2, separation: float = 4.0) -> Dataset:
    """Two unit-variance Gaussian classes centred at -/+ separation/2 along the first axis.

    Points are mapped into the unit box by ``0.5 + x / (separation + 8)`` and clipped.
    Samples are stored as flat vectors of length ``dim``.
    """
    if separation <= 0:
        raise ValueError(f"separation must be positive, got {separation}")
    centres = np.zeros((2, dim))
    centres[0, 0], centres[1, 0] = -separation / 2, separation / 2
    labels = np.repeat(np.arange(2), n_per_class)
    points = centres[labels] + rng.standard_normal((2 * n_per_class, dim))
    images = np.clip(0.5 + points / (separation + 8.0), 0.0, 1.0)
    return Dataset(images, labels, f"two-gaussians-d{dim}-s{separation:g}", num_classes=2)


def batches(dataset: Dataset, batch_size: int, rng: np.random.Generator | None = None, shuffle: bool = True):
    """Yield ``(images, labels)`` minibatches; the last partial batch is included."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    if shuffle:
        if rng is None:
            raise ValueError("shuffling needs an rng")
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for lo in range(0, n, batch_size):
        idx = order[lo:lo + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"LATADVCK"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointArchitectureError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    network: Network
    provenance: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(net: Network, provenance: dict | None = None, version: int = CHECKPOINT_VERSION) -> bytes:
    meta = {
        "architecture": net.architecture(),
        "dtype": np.dtype(net.dtype).name,
        "provenance": provenance or {},
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in net.parameters())
    body = _HEADER.pack(CHECKPOINT_MAGIC, version, len(meta_bytes)) + meta_bytes + payload
    return body + hashlib.sha256(body).digest()


def save_checkpoint(net: Network, provenance: dict | None, path) -> None:
    """Write ``net`` and its training provenance to ``path`` (atomically)."""
    atomic_write(path, encode_checkpoint(net, provenance))


def decode_checkpoint(raw: bytes, expected_architecture: dict | None = None) -> Checkpoint:
    if len(raw) < _HEADER.size or raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    _, version, meta_len = _HEADER.unpack_from(raw)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} is not supported (this build reads version {CHECKPOINT_VERSION})")
    body, digest = raw[:-32], raw[-32:]
    if len(raw) < _HEADER.size + meta_len + 32 or hashlib.sha256(body).digest() != digest:
        raise CheckpointChecksumError("checkpoint checksum mismatch (file truncated or corrupted)")
    meta = json.loads(body[_HEADER.size:_HEADER.size + meta_len])
    arch = meta["architecture"]
    if expected_architecture is not None and arch != expected_architecture:
        raise CheckpointArchitectureError("checkpoint architecture differs from the expected architecture")
    payload = np.frombuffer(body, dtype="<f8", offset=_HEADER.size + meta_len)
    shapes = param_shapes(arch)
    sizes = [int(np.prod(s)) for s in shapes]
    if sum(sizes) != payload.size:
        raise CheckpointArchitectureError(f"payload holds {payload.size} values, architecture needs {sum(sizes)}")
    params, offset = [], 0
    dtype = np.dtype(meta.get("dtype", "float64"))
    for shape, size in zip(shapes, sizes):
        params.append(payload[offset:offset + size].reshape(shape).astype(dtype))
        offset += size
    try:
        net = build_from_architecture(arch, params)
    except (ValueError, KeyError) as exc:
        raise CheckpointArchitectureError(f"invalid architecture: {exc}") from exc
    return Checkpoint(net, meta.get("provenance", {}), version)


def load_checkpoint(path, expected_architecture: dict | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes(), expected_architecture)
