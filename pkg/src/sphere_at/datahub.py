"""Datasets, IDX ingestion, batching and parametric corruptions.

Every input produced here lies in [0, 1]. Corruption severities map to these
parameters (severity 1..5):

=============  ===================================  ==========================
kind           parameter                            values
=============  ===================================  ==========================
gaussian-noise noise std                            .02 .04 .08 .12 .18
brightness     additive shift                       .05 .10 .15 .20 .30
contrast       1 - contrast factor (distortion)     .20 .40 .50 .60 .70
pixelate       block edge in pixels                 2 3 4 5 7
=============  ===================================  ==========================
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .diffcore import ContractError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CORRUPTION_TABLE = {
    "gaussian-noise": (0.02, 0.04, 0.08, 0.12, 0.18),
    "brightness": (0.05, 0.10, 0.15, 0.20, 0.30),
    "contrast": (0.20, 0.40, 0.50, 0.60, 0.70),
    "pixelate": (2, 3, 4, 5, 7),
}


class IdxParseError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    name: str = "data"
    split: str = "train"

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ContractError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.inputs.size and (self.inputs.min() < 0 or self.inputs.max() > 1):
            raise ContractError("inputs must lie in [0, 1]")
        if self.labels.size and self.labels.min() < 0:
            raise ContractError("labels must be non-negative")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.name, split or self.split)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in CORRUPTION_TABLE:
            raise ContractError(f"unknown corruption {self.kind!r}")
        if self.severity not in (1, 2, 3, 4, 5):
            raise ContractError(f"severity must be in 1..5, got {self.severity}")

    @property
    def parameter(self):
        return CORRUPTION_TABLE[self.kind][self.severity - 1]


# -- synthetic ----------------------------------------------------------------

def moons_raw(n: int, noise: float, rng: np.random.Generator):
    """Unscaled interleaved arcs: class 0 on (cos t, sin t), class 1 on (1 - cos t, 1/2 - sin t)."""
    half = n // 2
    t0 = rng.uniform(0, np.pi, half)
    t1 = rng.uniform(0, np.pi, half)
    pts = np.concatenate([np.stack([np.cos(t0), np.sin(t0)], 1),
                          np.stack([1 - np.cos(t1), 0.5 - np.sin(t1)], 1)])
    if noise > 0:
        pts = pts + rng.normal(0, noise, pts.shape)
    labels = np.repeat([0, 1], half)
    return pts, labels


MOONS_OFFSET = np.array([1.25, 1.25])
MOONS_SCALE = 3.5


def moons_to_unit(pts: np.ndarray) -> np.ndarray:
    """Fixed isotropic map of the moons box [-1, 2] x [-1/2, 1] into [0, 1]^2."""
    return np.clip((pts + MOONS_OFFSET) / MOONS_SCALE, 0.0, 1.0)


def make_two_moons(n: int, noise: float, seed: int, split: str = "train") -> Dataset:
    if n % 2:
        raise ContractError(f"two-moons needs an even n, got {n}")
    rng = np.random.default_rng(seed)
    pts, labels = moons_raw(n, noise, rng)
    order = rng.permutation(n)
    return Dataset(moons_to_unit(pts[order]), labels[order], "two-moons", split)


# -- IDX ------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _parse_idx(buf: bytes, magic: int, what: str):
    if len(buf) < 4:
        raise IdxParseError(f"{what}: file too short for magic number", 0)
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise IdxParseError(f"{what}: magic 0x{got:08x}, expected 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    hdr = 4 + 4 * ndim
    if len(buf) < hdr:
        raise IdxParseError(f"{what}: header truncated", len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:hdr])
    need = int(np.prod(dims, dtype=np.int64))
    if len(buf) - hdr < need:
        raise IdxParseError(f"{what}: expected {need} data bytes, found {len(buf) - hdr}", len(buf))
    if len(buf) - hdr > need:
        raise IdxParseError(f"{what}: {len(buf) - hdr - need} trailing bytes", hdr + need)
    return dims, np.frombuffer(buf, dtype=np.uint8, offset=hdr)


def load_idx_images(images_path, labels_path, name: str = "idx", split: str = "train") -> Dataset:
    """MNIST-style IDX pair (optionally gzipped); pixels scaled to [0, 1], shape (N, 1, H, W)."""
    dims, pix = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, "images")
    (count,), labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, "labels")
    if count != dims[0]:
        raise IdxParseError(f"labels file holds {count} items but images file holds {dims[0]}", 4)
    images = pix.reshape(dims[0], 1, dims[1], dims[2]).astype(np.float64) / 255.0
    return Dataset(images, labels.astype(np.int64), name, split)


def write_idx_images(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (N, H, W) or (N, 1, H, W) and labels as an IDX pair."""
    images = np.asarray(images)
    if images.ndim == 4:
        images = images[:, 0]
    if images.dtype != np.uint8:
        images = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n)
                                  + np.asarray(labels, dtype=np.uint8).tobytes())


def mnist_subset(n_test: int = 1000, seed: int = 0):
    """The 5,000-image MNIST subset shipped with mlxtend, split into (train, test).

    The split is stratified: ``n_test / 10`` images of every digit go to test.
    """
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    rng = np.random.default_rng(seed)
    per = n_test // 10
    test_idx = np.concatenate([rng.permutation(np.flatnonzero(y == c))[:per] for c in range(10)])
    mask = np.ones(len(y), dtype=bool)
    mask[test_idx] = False
    images = (X / 255.0).reshape(-1, 1, 28, 28)
    train_idx = np.flatnonzero(mask)
    train_idx = train_idx[rng.permutation(len(train_idx))]
    test_idx = test_idx[rng.permutation(len(test_idx))]
    labels = y.astype(np.int64)
    return (Dataset(images[train_idx], labels[train_idx], "mnist-subset", "train"),
            Dataset(images[test_idx], labels[test_idx], "mnist-subset", "test"))


# -- corruptions and batching ------------------------------------------------------

def _pixelate(x: np.ndarray, block: int) -> np.ndarray:
    if x.ndim != 4:
        raise ContractError("pixelate needs (N, C, H, W) images")
    n, c, h, w = x.shape
    out = np.empty_like(x)
    for i in range(0, h, block):
        for j in range(0, w, block):
            patch = x[:, :, i:i + block, j:j + block]
            out[:, :, i:i + block, j:j + block] = patch.mean(axis=(2, 3), keepdims=True)
    return out


def corrupt(dataset: Dataset, spec: CorruptionSpec, seed: int = 0) -> Dataset:
    x = dataset.inputs
    p = spec.parameter
    if spec.kind == "gaussian-noise":
        out = x + np.random.default_rng(seed).normal(0.0, p, x.shape)
    elif spec.kind == "brightness":
        out = x + p
    elif spec.kind == "contrast":
        axes = tuple(range(1, x.ndim))
        mu = x.mean(axis=axes, keepdims=True)
        out = (x - mu) * (1.0 - p) + mu
    else:
        out = _pixelate(x, int(p))
    return replace(dataset, inputs=np.clip(out, 0.0, 1.0),
                   name=f"{dataset.name}+{spec.kind}{spec.severity}")


def batches(dataset: Dataset, batch_size: int, shuffle_seed: int | np.random.Generator | None = 0
            ) -> Iterator[tuple]:
    """One pass in a seeded random order; the final partial batch is kept."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    n = len(dataset)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        rng = shuffle_seed if isinstance(shuffle_seed, np.random.Generator) else np.random.default_rng(shuffle_seed)
        order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.inputs[idx], dataset.labels[idx]
