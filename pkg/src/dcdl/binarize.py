"""Binarization of inputs: error-diffusion dithering, categorical expansion
and one-vs-all class balancing.

Grayscale intensities live in [0, 1].  Dithering thresholds at 0.5 and
diffuses the residual to unvisited neighbours in raster order with the
classic kernel (7/16 right, 3/16 below-left, 5/16 below, 1/16 below-right);
error falling outside the image is discarded.  RGB images are dithered one
channel at a time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boolcore import BitInstance, n_words, pack_bools, popcount, unpack_words, _pad_mask
from .errors import ContractError

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a wheel away, but stay runnable
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


@dataclass
class GrayImage:
    """Real-valued image, intensities in [0, 1], shape (height, width, channels)."""

    width: int
    height: int
    channels: int
    data: np.ndarray

    def __post_init__(self):
        if self.data.shape != (self.height, self.width, self.channels):
            raise ContractError(
                f"data shape {self.data.shape} != (h={self.height}, w={self.width}, c={self.channels})"
            )
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ContractError("intensities must lie in [0, 1]")

    @classmethod
    def from_array(cls, data) -> "GrayImage":
        data = np.asarray(data, dtype=np.float32)
        if data.ndim == 2:
            data = data[:, :, None]
        h, w, c = data.shape
        return cls(width=w, height=h, channels=c, data=data)

    def mean_intensity(self) -> float:
        return float(self.data.mean())


@dataclass
class BitPlane:
    """Binary image, packed per the flat index (channel*H + row)*W + col."""

    width: int
    height: int
    channels: int
    bits: np.ndarray  # (n_words,) uint64

    def __post_init__(self):
        if self.bits.shape != (n_words(self.n),) or self.bits.dtype != np.uint64:
            raise ContractError("bits must be a uint64 array of n_words(h*w*c) words")
        if popcount(self.bits & ~_pad_mask(self.n)):
            raise ContractError("pad bits beyond h*w*c must be zero")

    @property
    def n(self) -> int:
        return self.width * self.height * self.channels

    @classmethod
    def from_bool_array(cls, values) -> "BitPlane":
        """values has shape (channels, height, width)."""
        values = np.asarray(values, dtype=bool)
        if values.ndim == 2:
            values = values[None, :, :]
        c, h, w = values.shape
        return cls(width=w, height=h, channels=c, bits=pack_bools(values.reshape(-1)))

    def to_bool_array(self) -> np.ndarray:
        """Shape (channels, height, width)."""
        flat = unpack_words(self.bits, self.n)
        return flat.reshape(self.channels, self.height, self.width)

    def as_instance(self) -> BitInstance:
        return BitInstance(self.bits.copy(), self.n)

    def density(self) -> float:
        return popcount(self.bits) / self.n


@njit(cache=True)
def _diffuse_channel(buf, out):
    h, w = buf.shape
    for y in range(h):
        for x in range(w):
            old = buf[y, x]
            if old >= 0.5:
                out[y, x] = True
                err = old - 1.0
            else:
                out[y, x] = False
                err = old
            if x + 1 < w:
                buf[y, x + 1] += err * 0.4375  # 7/16
            if y + 1 < h:
                if x > 0:
                    buf[y + 1, x - 1] += err * 0.1875  # 3/16
                buf[y + 1, x] += err * 0.3125  # 5/16
                if x + 1 < w:
                    buf[y + 1, x + 1] += err * 0.0625  # 1/16
    return out


def dither_floyd_steinberg(img: GrayImage) -> BitPlane:
    """Error-diffuse each channel independently to a strictly binary plane."""
    out = np.zeros((img.channels, img.height, img.width), dtype=bool)
    for ch in range(img.channels):
        buf = img.data[:, :, ch].astype(np.float64)
        _diffuse_channel(buf, out[ch])
    return BitPlane.from_bool_array(out)


def expand_categorical(value: int, n_values: int) -> BitInstance:
    """One-hot boolean encoding of a categorical value."""
    if not 0 <= value < n_values:
        raise ContractError(f"category {value} out of range [0, {n_values})")
    row = np.zeros(n_values, dtype=bool)
    row[value] = True
    return BitInstance.from_bools(row)


def balance_one_vs_all(dataset, target_class: int, size: int, rng: np.random.Generator):
    """Uniformly sample a balanced one-vs-all subset.

    Half the subset comes from the target class, the other half in equal
    shares from the remaining classes (remainders go to the lowest class
    indices).  Original class labels are preserved; the binary view is
    label == target_class.  Output order is shuffled.
    """
    from .datasets import LabeledImageSet

    labels = np.asarray(dataset.labels)
    classes = dataset.class_count
    if not 0 <= target_class < classes:
        raise ContractError(f"target class {target_class} out of range [0, {classes})")
    n_pos = size // 2
    n_neg = size - n_pos
    others = [c for c in range(classes) if c != target_class]
    base, rem = divmod(n_neg, len(others)) if others else (0, 0)
    need = {target_class: n_pos}
    for rank, c in enumerate(others):
        need[c] = base + (1 if rank < rem else 0)

    chosen = []
    for c in sorted(need):
        pool = np.flatnonzero(labels == c)
        if pool.size < need[c]:
            raise ContractError(
                f"class {c} has {pool.size} items, need {need[c]} for a balanced subset of {size}"
            )
        chosen.append(rng.choice(pool, size=need[c], replace=False))
    order = rng.permutation(np.concatenate(chosen))
    return LabeledImageSet(
        images=[dataset.images[i] for i in order],
        labels=labels[order].copy(),
        class_count=classes,
        split_tag=dataset.split_tag,
    )


def binary_labels(dataset, target_class: int) -> np.ndarray:
    """One-vs-all boolean view of a labeled set."""
    return np.asarray(dataset.labels) == target_class
