"""Dataset containers, IDX ingestion and synthetic data."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Dataset",
    "IdxFormatError",
    "load_idx",
    "load_mnist",
    "write_idx",
    "make_gaussian_blobs",
    "sample",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    """Malformed IDX file. ``offset`` is the byte position of the problem."""

    def __init__(self, path, offset, message):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


@dataclass(frozen=True)
class Dataset:
    """Images in ``[0, 1]`` stacked as ``(N, *input_shape)`` with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    split: str = "train"
    num_classes: int | None = None

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if self.num_classes is None:
            inferred = int(self.labels.max()) + 1 if len(self.labels) else 0
            object.__setattr__(self, "num_classes", inferred)
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    @property
    def n_features(self) -> int:
        return int(np.prod(self.input_shape))

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.name,
                       self.split, self.num_classes)


def _read_header(path, data: bytes, magic: int):
    if len(data) < 8:
        raise IdxFormatError(path, len(data), "file shorter than the 8-byte header")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise IdxFormatError(path, 0, f"bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = data[3]
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise IdxFormatError(path, len(data), f"truncated header, need {header_len} bytes")
    dims = struct.unpack(">" + "I" * ndim, data[4:header_len])
    expected = header_len + int(np.prod(dims, dtype=np.int64))
    if len(data) < expected:
        raise IdxFormatError(path, len(data),
                             f"truncated payload, expected {expected} bytes for dims {dims}")
    return dims, header_len


def load_idx(images_path, labels_path, *, name: str = "idx", split: str = "train",
             num_classes: int | None = None) -> Dataset:
    """Parse an IDX image/label file pair.

    Images become ``(N, 1, H, W)`` float64 arrays scaled by 1/255.
    """
    with open(images_path, "rb") as fh:
        img_bytes = fh.read()
    with open(labels_path, "rb") as fh:
        lab_bytes = fh.read()
    img_dims, img_off = _read_header(images_path, img_bytes, IDX_IMAGES_MAGIC)
    lab_dims, lab_off = _read_header(labels_path, lab_bytes, IDX_LABELS_MAGIC)
    if len(img_dims) != 3:
        raise IdxFormatError(images_path, 3, f"expected 3 dimensions, got {len(img_dims)}")
    if len(lab_dims) != 1:
        raise IdxFormatError(labels_path, 3, f"expected 1 dimension, got {len(lab_dims)}")
    if img_dims[0] != lab_dims[0]:
        raise IdxFormatError(labels_path, 4,
                             f"count mismatch: {img_dims[0]} images vs {lab_dims[0]} labels")
    count, h, w = img_dims
    pixels = np.frombuffer(img_bytes, dtype=np.uint8, count=count * h * w, offset=img_off)
    labels = np.frombuffer(lab_bytes, dtype=np.uint8, count=count, offset=lab_off)
    images = pixels.reshape(count, 1, h, w).astype(np.float64) / 255.0
    return Dataset(images, labels.astype(np.int64), name=name, split=split,
                   num_classes=num_classes)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images ``(N, H, W)`` and labels ``(N,)`` in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def _find(directory, stem):
    for candidate in (stem, stem.replace("-idx", ".idx")):
        for suffix in ("", ".gz"):
            path = os.path.join(directory, candidate + suffix)
            if os.path.exists(path):
                return path
    raise FileNotFoundError(f"no {stem} file in {directory}")


def load_mnist(directory, split: str = "test") -> Dataset:
    """Load the MNIST ``split`` from a directory holding the four IDX files.

    Both ``t10k-images-idx3-ubyte`` and ``t10k-images.idx3-ubyte`` spellings
    are accepted. Gzipped files are decompressed to memory.
    """
    images_stem, labels_stem = MNIST_FILES[split]
    images_path = _find(directory, images_stem)
    labels_path = _find(directory, labels_stem)
    if images_path.endswith(".gz") or labels_path.endswith(".gz"):
        import gzip
        import tempfile

        with tempfile.TemporaryDirectory() as tmp:
            paths = []
            for src in (images_path, labels_path):
                dst = os.path.join(tmp, os.path.basename(src).removesuffix(".gz"))
                opener = gzip.open if src.endswith(".gz") else open
                with opener(src, "rb") as fin, open(dst, "wb") as fout:
                    fout.write(fin.read())
                paths.append(dst)
            return load_idx(*paths, name="mnist", split=split, num_classes=10)
    return load_idx(images_path, labels_path, name="mnist", split=split, num_classes=10)


def make_gaussian_blobs(n_dims: int, n_classes: int, n_per_class: int,
                        separation: float, seed: int = 0, *, split: str = "train") -> Dataset:
    """Isotropic Gaussian classes centred on a regular simplex.

    Class means sit at ``separation`` noise standard deviations from the
    simplex centroid along the vertex directions; the whole cloud is then
    scaled into the unit box around 0.5 and clipped to ``[0, 1]``.
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if n_dims < n_classes:
        raise ValueError("n_dims must be at least n_classes")
    if not separation > 0:
        raise ValueError("separation must be positive")
    rng = np.random.default_rng(seed)
    vertices = np.eye(n_classes, n_dims) - np.eye(n_classes, n_dims).mean(axis=0)
    vertices /= np.linalg.norm(vertices, axis=1, keepdims=True)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    noise = rng.standard_normal((len(labels), n_dims))
    raw = separation * vertices[labels] + noise
    scale = 0.5 / (separation + 4.0)
    images = np.clip(0.5 + scale * raw, 0.0, 1.0)
    order = rng.permutation(len(labels))
    return Dataset(images[order], labels[order], name="blobs", split=split,
                   num_classes=n_classes)


def sample(dataset: Dataset, count: int, seed: int = 0) -> Dataset:
    """Uniform sample without replacement; chosen items keep dataset order."""
    if count < 0 or count > len(dataset):
        raise ValueError(f"cannot sample {count} items from a dataset of {len(dataset)}")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(dataset), size=count, replace=False))
    return dataset.subset(chosen)
