"""Deterministic synthetic image datasets and their binary file format.

Each class is a fixed 2-D sinusoidal pattern (class-specific frequency,
orientation, and per-channel phase) plus per-sample Gaussian pixel
noise, clamped to [0, 1]. The pretraining role and the downstream role
draw their frequencies from disjoint bands, so the two domains differ
the way a pretraining corpus differs from a downstream task.

File format ("DTAD", version 1, little-endian):
    magic 'DTAD' | u32 version | u32 count | u32 channels | u32 height
    | u32 width | u32 num_classes | count*C*H*W float32 pixels | count u32 labels
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np

from .errors import ContractError, CorruptionError, DataFormatError, VersionError
from .rng import substream

_F32 = np.float32

MAGIC = b"DTAD"
VERSION = 1

#: cycles-per-image frequency bands, disjoint by construction
ROLE_BANDS = {"pretrain": (1.5, 4.0), "downstream": (4.5, 8.0)}


@dataclass
class LabeledData:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=_F32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.labels.ndim != 1:
            raise ContractError("LabeledData expects (N,C,H,W) images and (N,) labels")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ContractError("image/label count mismatch")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError("labels out of range")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "LabeledData":
        return LabeledData(self.images[idx].copy(), self.labels[idx].copy(), self.num_classes)


@dataclass(frozen=True)
class SyntheticSpec:
    role: str
    classes: int
    per_class: int
    image_size: int
    channels: int = 3
    noise_sigma: float = 0.1
    seed: int = 0
    part: str = "train"  # names the noise stream; patterns depend only on (role, seed)

    def __post_init__(self):
        if self.role not in ROLE_BANDS:
            raise ContractError(f"role must be one of {tuple(ROLE_BANDS)}, got '{self.role}'")
        if self.classes < 2:
            raise ContractError("need at least 2 classes")
        if self.per_class < 1 or self.image_size < 2 or self.channels < 1:
            raise ContractError("per_class, image_size and channels must be positive")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be >= 0")


def _class_params(spec: SyntheticSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class (frequency, orientation, per-channel phase) draws."""
    rng = substream(spec.seed, "patterns", spec.role)
    lo, hi = ROLE_BANDS[spec.role]
    width = (hi - lo) / spec.classes
    freqs = np.empty(spec.classes)
    thetas = np.empty(spec.classes)
    phases = np.empty((spec.classes, spec.channels))
    for c in range(spec.classes):
        # stratified frequency keeps classes spread over the band
        freqs[c] = lo + (c + rng.uniform()) * width
        thetas[c] = rng.uniform(0.0, np.pi)
        phases[c] = rng.uniform(0.0, 2.0 * np.pi, size=spec.channels)
    return freqs, thetas, phases


def class_frequencies(spec: SyntheticSpec) -> np.ndarray:
    """The per-class frequencies the generator draws (for diagnostics)."""
    return _class_params(spec)[0]


def class_patterns(spec: SyntheticSpec) -> np.ndarray:
    """(classes, C, H, W) noiseless class prototypes in [0.1, 0.9]."""
    freqs, thetas, phases = _class_params(spec)
    s = spec.image_size
    coords = (np.arange(s) + 0.5) / s
    v, u = np.meshgrid(coords, coords, indexing="ij")
    out = np.empty((spec.classes, spec.channels, s, s), dtype=_F32)
    for c in range(spec.classes):
        axis = np.cos(thetas[c]) * u + np.sin(thetas[c]) * v
        for ch in range(spec.channels):
            out[c, ch] = 0.5 + 0.4 * np.sin(2.0 * np.pi * freqs[c] * axis + phases[c, ch])
    return out


def generate_synthetic(spec: SyntheticSpec) -> LabeledData:
    """Deterministic dataset of noisy class patterns, class-major order."""
    patterns = class_patterns(spec)
    noise_rng = substream(spec.seed, "noise", spec.role, spec.part)
    n = spec.classes * spec.per_class
    images = np.empty((n, spec.channels, spec.image_size, spec.image_size), dtype=_F32)
    labels = np.empty(n, dtype=np.int64)
    i = 0
    for c in range(spec.classes):
        for _ in range(spec.per_class):
            img = patterns[c]
            if spec.noise_sigma > 0:
                img = img + noise_rng.normal(0.0, spec.noise_sigma, size=img.shape)
            images[i] = np.clip(img, 0.0, 1.0)
            labels[i] = c
            i += 1
    return LabeledData(images, labels, spec.classes)


# ---------------------------------------------------------------------------
# file io
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<IIIIII")  # version, count, channels, height, width, classes


def write_dataset(path, data: LabeledData) -> None:
    n, c, h, w = data.images.shape
    pixels = np.ascontiguousarray(data.images, dtype="<f4")
    labels = np.ascontiguousarray(data.labels, dtype="<u4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(VERSION, n, c, h, w, data.num_classes))
        fh.write(pixels.tobytes())
        fh.write(labels.tobytes())


def read_dataset(path) -> LabeledData:
    raw = Path(path).read_bytes()
    if len(raw) < 4 + _HEADER.size:
        raise CorruptionError(f"{path}: file shorter than header")
    if raw[:4] != MAGIC:
        raise CorruptionError(f"{path}: bad magic {raw[:4]!r}")
    version, n, c, h, w, classes = _HEADER.unpack_from(raw, 4)
    if version != VERSION:
        raise VersionError(f"{path}: unsupported dataset version {version}")
    pixel_bytes = n * c * h * w * 4
    expected = 4 + _HEADER.size + pixel_bytes + n * 4
    if len(raw) != expected:
        raise CorruptionError(f"{path}: expected {expected} bytes, found {len(raw)}")
    off = 4 + _HEADER.size
    pixels = np.frombuffer(raw, dtype="<f4", count=n * c * h * w, offset=off)
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off + pixel_bytes)
    images = pixels.reshape(n, c, h, w).astype(_F32)
    if not np.all(np.isfinite(images)) or images.min() < 0.0 or images.max() > 1.0:
        raise DataFormatError(f"{path}: pixels must be finite and in [0, 1]")
    labels64 = labels.astype(np.int64)
    if labels64.size and labels64.max() >= classes:
        raise DataFormatError(f"{path}: labels exceed num_classes={classes}")
    return LabeledData(images, labels64, classes)
