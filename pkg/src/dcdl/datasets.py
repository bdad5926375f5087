"""Dataset ingestion and splits.

Loads MNIST-style IDX files and CIFAR-10 binary batches from local paths
(no downloads; see the DCDL_DATA_DIR environment variable), provides the
train/holdout split, two synthetic generators for data-free runs, and a
small binary container for dithered bit planes.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .binarize import BitPlane, GrayImage
from .boolcore import n_words, pack_bool_matrix, unpack_word_matrix
from .errors import Cifar10FormatError, ContractError, IdxFormatError, DataFormatError

DATA_DIR_ENV = "DCDL_DATA_DIR"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


@dataclass
class LabeledImageSet:
    images: list
    labels: np.ndarray
    class_count: int
    split_tag: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != self.labels.size:
            raise ContractError(f"{len(self.images)} images vs {self.labels.size} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ContractError("labels out of range for class_count")
        if self.split_tag not in ("train", "holdout", "test"):
            raise ContractError(f"unknown split tag {self.split_tag!r}")

    def __len__(self) -> int:
        return self.labels.size


def _read_exact(fh, count, path, what):
    data = fh.read(count)
    if len(data) != count:
        raise IdxFormatError(f"{path}: truncated while reading {what} "
                             f"(wanted {count} bytes, got {len(data)})")
    return data


def load_idx(images_path, labels_path, split_tag: str = "train") -> LabeledImageSet:
    """Load a big-endian IDX image/label file pair (the published MNIST layout)."""
    with open(images_path, "rb") as fh:
        magic, = struct.unpack(">I", _read_exact(fh, 4, images_path, "magic"))
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(
                f"{images_path}: bad image magic 0x{magic:08x} at offset 0 "
                f"(expected 0x{IDX_IMAGES_MAGIC:08x})")
        count, rows, cols = struct.unpack(">III", _read_exact(fh, 12, images_path, "header"))
        raw = _read_exact(fh, count * rows * cols, images_path, f"{count} images")
        pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)

    with open(labels_path, "rb") as fh:
        magic, = struct.unpack(">I", _read_exact(fh, 4, labels_path, "magic"))
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: bad label magic 0x{magic:08x} at offset 0 "
                f"(expected 0x{IDX_LABELS_MAGIC:08x})")
        label_count, = struct.unpack(">I", _read_exact(fh, 4, labels_path, "header"))
        labels = np.frombuffer(_read_exact(fh, label_count, labels_path, "labels"), dtype=np.uint8)

    if label_count != count:
        raise IdxFormatError(
            f"count mismatch: {images_path} has {count} images, {labels_path} has {label_count} labels")

    images = [GrayImage.from_array(pixels[i].astype(np.float32) / 255.0) for i in range(count)]
    return LabeledImageSet(images, labels.astype(np.int64), class_count=10, split_tag=split_tag)


def save_idx(dataset: LabeledImageSet, images_path, labels_path) -> None:
    """Re-serialize a loaded set; inverse of load_idx byte for byte."""
    if not dataset.images:
        raise ContractError("cannot serialize an empty set")
    h, w = dataset.images[0].height, dataset.images[0].width
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, len(dataset), h, w))
        for img in dataset.images:
            fh.write(np.rint(img.data[:, :, 0] * 255.0).astype(np.uint8).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(dataset)))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


CIFAR_RECORD = 1 + 3 * 32 * 32


def load_cifar10(batch_paths, split_tag: str = "train") -> LabeledImageSet:
    """Load CIFAR-10 binary batches (1 label byte + 3072 channel-planar pixel bytes)."""
    if isinstance(batch_paths, (str, os.PathLike)):
        batch_paths = [batch_paths]
    images, labels = [], []
    for path in batch_paths:
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) % CIFAR_RECORD != 0:
            whole = len(raw) // CIFAR_RECORD
            raise Cifar10FormatError(
                f"{path}: {len(raw)} bytes is not a multiple of {CIFAR_RECORD}; "
                f"record {whole} is truncated")
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(arr[:, 0].astype(np.int64))
        planar = arr[:, 1:].reshape(-1, 3, 32, 32)  # channel-planar, row-major
        for rec in planar:
            images.append(GrayImage.from_array(rec.transpose(1, 2, 0).astype(np.float32) / 255.0))
    return LabeledImageSet(images, np.concatenate(labels), class_count=10, split_tag=split_tag)


def split_holdout(dataset: LabeledImageSet, holdout_size: int, rng: np.random.Generator):
    """Disjoint uniform (train, holdout) split, deterministic under the rng seed."""
    if holdout_size >= len(dataset):
        raise ContractError(f"holdout size {holdout_size} must be < dataset size {len(dataset)}")
    order = rng.permutation(len(dataset))
    hold_idx, train_idx = order[:holdout_size], order[holdout_size:]

    def take(indices, tag):
        return LabeledImageSet(
            images=[dataset.images[i] for i in indices],
            labels=dataset.labels[indices].copy(),
            class_count=dataset.class_count,
            split_tag=tag,
        )

    return take(train_idx, "train"), take(hold_idx, "holdout")


# --- synthetic generators ----------------------------------------------------

def synthetic_planted_dnf(num_classes: int, per_class: int, height: int, width: int,
                          seed: int, k_plant: int = 3, fixed_frac: float = 0.25,
                          split_tag: str = "train"):
    """Binary {0,1} images where each class satisfies its own planted k-term DNF.

    A sample for class c picks one random term of the class formula, forces
    its literals, and fills free pixels with fair coin flips.  Returns the
    image set and the planted formulas.
    """
    from .boolcore import DnfFormula, Term

    rng = np.random.default_rng(seed)
    n = height * width
    formulas = []
    for _ in range(num_classes):
        terms = []
        for _ in range(k_plant):
            chosen = rng.random(n) < fixed_frac
            polarity = rng.random(n) < 0.5
            terms.append(Term(
                pack_bool_matrix((chosen & polarity)[None, :])[0],
                pack_bool_matrix((chosen & ~polarity)[None, :])[0],
                n,
            ))
        formulas.append(DnfFormula(terms, n))

    images, labels = [], []
    for c, formula in enumerate(formulas):
        for _ in range(per_class):
            values = rng.random(n) < 0.5
            term = formula.terms[int(rng.integers(k_plant))]
            pos = unpack_word_matrix(term.pos[None, :], n)[0]
            neg = unpack_word_matrix(term.neg[None, :], n)[0]
            values[pos] = True
            values[neg] = False
            images.append(GrayImage.from_array(values.reshape(height, width).astype(np.float32)))
            labels.append(c)
    order = rng.permutation(len(images))
    return (
        LabeledImageSet([images[i] for i in order], np.asarray(labels)[order],
                        class_count=num_classes, split_tag=split_tag),
        formulas,
    )


def synthetic_prototypes(num_classes: int, per_class: int, height: int, width: int,
                         seed: int, coarse: int = 7, noise: float = 0.22,
                         split_tag: str = "train") -> LabeledImageSet:
    """Grayscale images around one smooth random prototype per class.

    Prototypes are bilinearly upsampled coarse random grids; samples add
    pixel noise and clip to [0, 1].  Classes are easy for a small CNN yet
    not expressible as a short DNF over raw pixels, which makes this the
    stand-in for natural-image runs when no real data directory is set.
    """
    rng = np.random.default_rng(seed)

    def upsample(grid):
        ys = np.linspace(0, grid.shape[0] - 1, height)
        xs = np.linspace(0, grid.shape[1] - 1, width)
        y0 = np.floor(ys).astype(int)
        x0 = np.floor(xs).astype(int)
        y1 = np.minimum(y0 + 1, grid.shape[0] - 1)
        x1 = np.minimum(x0 + 1, grid.shape[1] - 1)
        wy = (ys - y0)[:, None]
        wx = (xs - x0)[None, :]
        return ((1 - wy) * (1 - wx) * grid[np.ix_(y0, x0)]
                + (1 - wy) * wx * grid[np.ix_(y0, x1)]
                + wy * (1 - wx) * grid[np.ix_(y1, x0)]
                + wy * wx * grid[np.ix_(y1, x1)])

    protos = [upsample(rng.random((coarse, coarse))) for _ in range(num_classes)]
    images, labels = [], []
    for c, proto in enumerate(protos):
        samples = proto[None, :, :] + rng.normal(0.0, noise, size=(per_class, height, width))
        samples = np.clip(samples, 0.0, 1.0).astype(np.float32)
        for s in samples:
            images.append(GrayImage.from_array(s))
            labels.append(c)
    order = rng.permutation(len(images))
    return LabeledImageSet([images[i] for i in order], np.asarray(labels)[order],
                           class_count=num_classes, split_tag=split_tag)


# --- packed bit-plane container ----------------------------------------------

BITPLANE_MAGIC = b"DCDLBP01"


def save_bitplanes(path, planes: list[BitPlane], labels, class_count: int) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    if len(planes) != labels.size:
        raise ContractError("plane/label count mismatch")
    if not planes:
        raise ContractError("cannot serialize an empty plane list")
    h, w, c = planes[0].height, planes[0].width, planes[0].channels
    with open(path, "wb") as fh:
        fh.write(BITPLANE_MAGIC)
        fh.write(struct.pack("<IIIII", len(planes), h, w, c, class_count))
        fh.write(labels.tobytes())
        for plane in planes:
            if (plane.height, plane.width, plane.channels) != (h, w, c):
                raise ContractError("all planes must share geometry")
            fh.write(plane.bits.tobytes())


def load_bitplanes(path):
    """Returns (planes, labels, class_count)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != BITPLANE_MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r} at offset 0")
        header = fh.read(20)
        if len(header) != 20:
            raise DataFormatError(f"{path}: truncated header")
        count, h, w, c, class_count = struct.unpack("<IIIII", header)
        labels = np.frombuffer(fh.read(count), dtype=np.uint8)
        if labels.size != count:
            raise DataFormatError(f"{path}: truncated label block")
        W = n_words(h * w * c)
        raw = fh.read(count * W * 8)
        if len(raw) != count * W * 8:
            raise DataFormatError(f"{path}: truncated plane data")
        words = np.frombuffer(raw, dtype="<u8").reshape(count, W)
        planes = [BitPlane(width=w, height=h, channels=c, bits=words[i].copy())
                  for i in range(count)]
    return planes, labels.astype(np.int64), class_count


# --- data directory discovery -------------------------------------------------

def resolve_data_dir(explicit=None):
    """Explicit path wins; otherwise the DCDL_DATA_DIR environment variable."""
    if explicit:
        return explicit
    return os.environ.get(DATA_DIR_ENV)


def load_mnist_dir(data_dir, fashion: bool = False):
    """Load the predefined train/test split from a directory of IDX files.

    Fashion variants live in a 'fashion' subdirectory with the same file names
    if not stored flat.
    """
    base = data_dir
    if fashion:
        candidate = os.path.join(data_dir, "fashion")
        if os.path.isdir(candidate):
            base = candidate
    paths = [os.path.join(base, name) for name in MNIST_FILES]
    for p in paths:
        if not os.path.exists(p):
            raise FileNotFoundError(f"missing dataset file: {p}")
    train = load_idx(paths[0], paths[1], split_tag="train")
    test = load_idx(paths[2], paths[3], split_tag="test")
    return train, test
