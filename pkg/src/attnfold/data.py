"""Datasets: seeded synthetic images and the CIFAR-10 binary format."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvariantError

CIFAR_RECORD = 3073  # 1 label byte + 3*32*32 pixel bytes


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float64
    labels: np.ndarray  # [N] int64

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise InvariantError(f"{self.images.shape[0]} images but "
                                 f"{self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return int(self.images.shape[0])


def synth_dataset(classes: int, samples: int, image_size: int, seed: int,
                  channels: int = 3) -> Dataset:
    """Class-dependent oriented ramps plus Gaussian noise, deterministic per seed.

    Class k draws an intensity ramp along angle pi*k/classes with a
    class-and-channel dependent mean offset, so both channel statistics
    and orientation carry label information.
    """
    if classes < 1 or samples < 0 or image_size < 1:
        raise InvariantError("classes and image_size must be positive, samples >= 0")
    rng = np.random.default_rng(seed)
    labels = np.arange(samples, dtype=np.int64) % classes
    ii, jj = np.meshgrid(np.arange(image_size), np.arange(image_size), indexing="ij")
    center = (image_size - 1) / 2.0
    images = np.empty((samples, channels, image_size, image_size))
    for idx in range(samples):
        k = labels[idx]
        angle = np.pi * k / classes
        ramp = (np.cos(angle) * (ii - center) + np.sin(angle) * (jj - center))
        ramp /= max(image_size, 1)
        for c in range(channels):
            offset = 0.3 * np.sin(2 * np.pi * k / classes + 2 * np.pi * c / 3.0)
            images[idx, c] = 0.5 + offset + 0.6 * ramp
    images += rng.normal(0.0, 0.08, size=images.shape)
    return Dataset(images=images, labels=labels)


def load_cifar10_bin(paths, norm_mean=None, norm_std=None) -> Dataset:
    """Parse CIFAR-10 binary files: per record 1 label byte then R,G,B planes.

    Pixels are scaled to [0,1]; per-channel normalization (x-mean)/std is
    applied when given.
    """
    if isinstance(paths, (str, bytes)):
        paths = [paths]
    chunks, labels = [], []
    for path in paths:
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) % CIFAR_RECORD != 0:
            raise FormatError(
                f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}; "
                f"truncated at byte offset {len(raw) - len(raw) % CIFAR_RECORD}")
        n = len(raw) // CIFAR_RECORD
        if n == 0:
            continue
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD)
        lab = rec[:, 0].astype(np.int64)
        bad = np.nonzero(lab > 9)[0]
        if bad.size:
            raise FormatError(f"{path}: label {int(lab[bad[0]])} > 9 at record "
                              f"{int(bad[0])} (byte offset {int(bad[0]) * CIFAR_RECORD})")
        chunks.append(rec[:, 1:].reshape(n, 3, 32, 32).astype(np.float64) / 255.0)
        labels.append(lab)
    if not chunks:
        return Dataset(images=np.zeros((0, 3, 32, 32)), labels=np.zeros(0, dtype=np.int64))
    images = np.concatenate(chunks, axis=0)
    labels_all = np.concatenate(labels, axis=0)
    if norm_mean is not None:
        mean = np.asarray(norm_mean, dtype=np.float64)
        std = np.asarray(norm_std if norm_std is not None else [1.0] * 3, dtype=np.float64)
        if mean.shape != (3,) or std.shape != (3,):
            raise FormatError("normalization mean/std must have 3 channel entries")
        if (std <= 0).any():
            raise FormatError("normalization std must be positive")
        images = (images - mean[:, None, None]) / std[:, None, None]
    return Dataset(images=images, labels=labels_all)


def augment_batch(images: np.ndarray, rng: np.random.Generator, *,
                  flip: bool, crop: bool, pad: int = 4) -> np.ndarray:
    """Horizontal flip and pad-then-random-crop, both per sample."""
    out = images
    if flip:
        out = out.copy()
        do = rng.random(out.shape[0]) < 0.5
        out[do] = out[do, :, :, ::-1]
    if crop:
        n, c, h, w = out.shape
        padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        rows = rng.integers(0, 2 * pad + 1, size=n)
        cols = rng.integers(0, 2 * pad + 1, size=n)
        cropped = np.empty_like(out)
        for i in range(n):
            cropped[i] = padded[i, :, rows[i]:rows[i] + h, cols[i]:cols[i] + w]
        out = cropped
    return out
