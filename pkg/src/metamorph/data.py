"""SynthShapes: a procedurally generated 4-class image set, and raw NMIM/NMLB I/O.

Classes: 0 horizontal gradient, 1 vertical gradient, 2 centred Gaussian blob,
3 checkerboard of 4x4 cells. Every image is a pure function of
``(seed, split, index)``; the label is ``index % 4``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError
from .persist import atomic_write
from .rng import RngStream

SPLITS = {"train": 0, "test": 1}
NUM_CLASSES = 4


@dataclass(frozen=True)
class SynthShapes:
    seed: int = 0
    size: int = 16
    noise: float = 0.3
    brightness: tuple[float, float] = (0.7, 1.3)
    blob_sigma: float = 3.0
    cell: int = 4
    train_count: int = 4096
    test_count: int = 1024

    def count(self, split: str) -> int:
        if split not in SPLITS:
            raise ContractError(f"unknown split {split!r}")
        return self.train_count if split == "train" else self.test_count

    def pattern(self, label: int) -> np.ndarray:
        n = self.size
        ramp = np.arange(n, dtype=np.float64) / (n - 1)
        if label == 0:
            return np.tile(ramp, (n, 1))
        if label == 1:
            return np.tile(ramp[:, None], (1, n))
        yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
        if label == 2:
            c = (n - 1) / 2
            return np.exp(-((xx - c) ** 2 + (yy - c) ** 2) / (2 * self.blob_sigma ** 2))
        if label == 3:
            return (((xx // self.cell) + (yy // self.cell)) % 2).astype(np.float64)
        raise ContractError(f"label {label} out of range")

    def generate(self, split: str, index: int) -> tuple[np.ndarray, int]:
        """One ``[1, size, size]`` float32 image in [0, 1] and its label."""
        if not 0 <= index < self.count(split):
            raise IndexError(f"index {index} out of range for split {split!r}")
        label = index % NUM_CLASSES
        g = np.random.default_rng([self.seed, SPLITS[split], index])
        gain = g.uniform(*self.brightness)
        noise = g.uniform(-self.noise, self.noise, size=(self.size, self.size)) if self.noise else 0.0
        img = np.clip(gain * self.pattern(label) + noise, 0.0, 1.0)
        return img[None].astype(np.float32), label

    def split(self, split: str) -> "Dataset":
        n = self.count(split)
        images = np.empty((n, 1, self.size, self.size), dtype=np.float32)
        labels = np.empty(n, dtype=np.int64)
        for i in range(n):
            images[i], labels[i] = self.generate(split, i)
        return Dataset(images, labels)


def generate(seed: int, split: str, index: int) -> tuple[np.ndarray, int]:
    return SynthShapes(seed=seed).generate(split, index)


@dataclass
class Dataset:
    images: np.ndarray  # [n, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [n] int64

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ContractError("images and labels differ in count")

    def __len__(self) -> int:
        return len(self.labels)

    def batches(self, batch_size: int, rng: RngStream | None = None, augment: bool = False, pad: int = 2):
        """Yield ``(images, labels)``; shuffled and augmented only when ``rng`` is given."""
        n = len(self)
        order = rng.permutation(n) if rng is not None else np.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            x = self.images[idx]
            if augment:
                if rng is None:
                    raise ContractError("augmentation needs an RngStream")
                x = augment_batch(x, rng, pad)
            yield x, self.labels[idx]


def augment_batch(x: np.ndarray, rng: RngStream, pad: int = 2) -> np.ndarray:
    """Random crop from a zero-padded copy plus random horizontal flip."""
    B, C, H, W = x.shape
    g = rng.generator()
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = g.integers(0, 2 * pad + 1, size=B)
    dx = g.integers(0, 2 * pad + 1, size=B)
    flip = g.random(B) < 0.5
    out = np.empty_like(x)
    for i in range(B):
        crop = padded[i, :, dy[i]:dy[i] + H, dx[i]:dx[i] + W]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


# -- raw formats ------------------------------------------------------------

_IMG_HEADER = struct.Struct("<4sIIII")
_LBL_HEADER = struct.Struct("<4sI")


def write_raw(dataset: Dataset, images_path, labels_path) -> None:
    """Write pixels as bytes (value * 255, rounded) with NMIM/NMLB headers."""
    n = len(dataset)
    if n:
        _, C, H, W = dataset.images.shape
        pixels = np.rint(np.clip(dataset.images, 0, 1) * 255).astype(np.uint8).transpose(0, 2, 3, 1)
    else:
        C = H = W = 0
        pixels = np.zeros(0, dtype=np.uint8)
    atomic_write(images_path, _IMG_HEADER.pack(b"NMIM", n, H, W, C) + pixels.tobytes())
    atomic_write(labels_path, _LBL_HEADER.pack(b"NMLB", n) + dataset.labels.astype(np.uint8).tobytes())


def load_raw(images_path, labels_path) -> Dataset:
    """Read an NMIM image file and NMLB label file; pixels scaled to [0, 1]."""
    with open(images_path, "rb") as fh:
        blob = fh.read()
    with open(labels_path, "rb") as fh:
        lblob = fh.read()
    if len(blob) < _IMG_HEADER.size:
        raise FormatError("image file shorter than its header")
    magic, n, H, W, C = _IMG_HEADER.unpack_from(blob)
    if magic != b"NMIM":
        raise FormatError(f"bad image magic {magic!r}")
    if len(lblob) < _LBL_HEADER.size:
        raise FormatError("label file shorter than its header")
    lmagic, ln = _LBL_HEADER.unpack_from(lblob)
    if lmagic != b"NMLB":
        raise FormatError(f"bad label magic {lmagic!r}")
    if ln != n:
        raise FormatError(f"image count {n} != label count {ln}")
    expected = n * H * W * C
    payload = blob[_IMG_HEADER.size:]
    lpayload = lblob[_LBL_HEADER.size:]
    if len(payload) != expected:
        raise FormatError(f"image payload has {len(payload)} bytes, expected {expected}")
    if len(lpayload) != n:
        raise FormatError(f"label payload has {len(lpayload)} bytes, expected {n}")
    if n == 0:
        return Dataset(np.zeros((0, C, H, W), dtype=np.float32), np.zeros(0, dtype=np.int64))
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(n, H, W, C).transpose(0, 3, 1, 2)
    images = (pixels.astype(np.float32) / 255.0).copy()
    labels = np.frombuffer(lpayload, dtype=np.uint8).astype(np.int64)
    return Dataset(images, labels)


def quantize(dataset: Dataset) -> Dataset:
    """The dataset as it would be after a raw write/read round trip."""
    pixels = np.rint(np.clip(dataset.images, 0, 1) * 255).astype(np.uint8)
    return Dataset(pixels.astype(np.float32) / 255.0, dataset.labels.copy())

