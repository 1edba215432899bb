"""Datasets and the persisted poison container.

Images live in raw pixel space [0,1]; any normalization belongs inside a
model stack, after poisons are applied, so the additive budget stays a pixel
budget. Subsets remember their original indices so sample-wise packs crafted
on a subset stay aligned with it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

PACK_MAGIC = b"PZN1"
PACK_VERSION = 1
CLASS_WISE = "class_wise"
SAMPLE_WISE = "sample_wise"

# Slack on the l-inf budget check: float32 packs are compared against the
# stored float32 epsilon, so anything beyond rounding noise is a real breach.
BUDGET_TOL = 1e-7

_CIFAR_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]
_CIFAR_RECORD = 3073  # 1 label byte + 3 channel-major 32x32 planes


@dataclass
class ImageDataset:
    """Labeled images: [n,C,H,W] float32 in [0,1], labels int64 in [0,K)."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str
    orig_indices: np.ndarray = field(default=None)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"dataset '{self.name}': images must be [n,C,H,W], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError(f"dataset '{self.name}': {self.images.shape[0]} images vs "
                            f"{self.labels.shape} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"dataset '{self.name}': labels outside [0,{self.num_classes})")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataError(f"dataset '{self.name}': pixels outside [0,1]")
        if self.orig_indices is None:
            self.orig_indices = np.arange(self.images.shape[0], dtype=np.int64)
        else:
            self.orig_indices = np.asarray(self.orig_indices, dtype=np.int64)

    @property
    def n(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])


def _read_cifar_file(path):
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % _CIFAR_RECORD:
        raise DataError(f"'{path}': length {len(raw)} is not a multiple of {_CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10(directory):
    """Load the CIFAR-10 binary batches from `directory` (or its
    cifar-10-batches-bin subdirectory). Returns (train, test)."""
    root = Path(directory)
    if not (root / _CIFAR_FILES[0]).exists() and (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    missing = [f for f in _CIFAR_FILES if not (root / f).exists()]
    if missing:
        raise DataError(f"CIFAR-10 files missing under '{root}': {', '.join(missing)}")
    train_parts = [_read_cifar_file(root / f) for f in _CIFAR_FILES[:5]]
    images = np.concatenate([p[0] for p in train_parts])
    labels = np.concatenate([p[1] for p in train_parts])
    train = ImageDataset(images, labels, num_classes=10, name="cifar10-train")
    test = ImageDataset(*_read_cifar_file(root / "test_batch.bin"), num_classes=10,
                        name="cifar10-test")
    return train, test


def subsample(ds, per_class, seed):
    """Stratified subset with exactly per_class items of each class.

    Selected indices are sorted ascending, so the subset preserves the
    source order and the draw is stable for a fixed seed.
    """
    rng = np.random.default_rng(seed)
    picks = []
    for k in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == k)
        if per_class > idx.size:
            raise DataError(f"per_class={per_class} exceeds class {k} count {idx.size}")
        picks.append(rng.choice(idx, size=per_class, replace=False))
    sel = np.sort(np.concatenate(picks))
    return ImageDataset(ds.images[sel], ds.labels[sel], num_classes=ds.num_classes,
                        name=f"{ds.name}/sub{per_class}", orig_indices=ds.orig_indices[sel])


def synth_blobs(n_per_class, num_classes, height=32, seed=0):
    """Class-conditional Gaussian-blob fixture.

    Class templates (bump position, color, width) depend only on
    (num_classes, height), so two calls with different seeds draw train and
    test sets from the same class-conditional distribution. The per-sample
    seed controls jitter and pixel noise.
    """
    if num_classes < 2:
        raise ConfigError("synth_blobs needs num_classes >= 2")
    # Template stream is keyed by (K, H) only, never by `seed`, and avoids
    # Python's randomized hash() so it is stable across processes.
    tmpl_rng = np.random.default_rng([20240, num_classes, height])
    centers = tmpl_rng.uniform(0.25 * height, 0.75 * height, size=(num_classes, 2))
    colors = tmpl_rng.uniform(0.2, 1.0, size=(num_classes, 3))
    widths = tmpl_rng.uniform(0.12 * height, 0.22 * height, size=num_classes)

    rng = np.random.default_rng(seed)
    n = n_per_class * num_classes
    labels = np.repeat(np.arange(num_classes), n_per_class).astype(np.int64)
    yy, xx = np.mgrid[0:height, 0:height].astype(np.float64)

    images = np.empty((n, 3, height, height), dtype=np.float32)
    jitter = rng.normal(0.0, 0.06 * height, size=(n, 2))
    amp = rng.uniform(0.8, 1.0, size=n)
    noise = rng.normal(0.0, 0.06, size=(n, 3, height, height))
    for i, k in enumerate(labels):
        cy, cx = centers[k] + jitter[i]
        r2 = (yy - cy) ** 2 + (xx - cx) ** 2
        bump = np.exp(-r2 / (2.0 * widths[k] ** 2))
        img = 0.25 + amp[i] * colors[k][:, None, None] * bump[None, :, :] * 0.7
        images[i] = img + noise[i]
    np.clip(images, 0.0, 1.0, out=images)
    return ImageDataset(images, labels, num_classes=num_classes,
                        name=f"blobs{num_classes}x{n_per_class}")


@dataclass
class PoisonPack:
    """A persisted set of additive perturbations plus how to apply them.

    class_wise packs hold one delta per class (m == num_classes); sample_wise
    packs hold one delta per example, bound to the source dataset by original
    indices rather than by position.
    """

    mode: str
    epsilon: float
    deltas: np.ndarray
    source: str
    num_classes: int
    orig_indices: np.ndarray | None = None

    def __post_init__(self):
        self.deltas = np.asarray(self.deltas, dtype=np.float32)
        self.epsilon = float(np.float32(self.epsilon))
        if self.orig_indices is not None:
            self.orig_indices = np.asarray(self.orig_indices, dtype=np.int64)
        self.validate()

    def validate(self):
        if self.mode not in (CLASS_WISE, SAMPLE_WISE):
            raise DataError(f"unknown pack mode '{self.mode}'")
        if self.deltas.ndim != 4:
            raise DataError(f"pack deltas must be [m,C,H,W], got {self.deltas.shape}")
        if self.mode == CLASS_WISE:
            if self.deltas.shape[0] != self.num_classes:
                raise DataError(f"class_wise pack has m={self.deltas.shape[0]} != K={self.num_classes}")
            if self.orig_indices is not None:
                raise DataError("class_wise pack must not carry original indices")
        else:
            if self.orig_indices is None or self.orig_indices.shape != (self.deltas.shape[0],):
                raise DataError("sample_wise pack needs one original index per delta")
        peak = float(np.abs(self.deltas).max()) if self.deltas.size else 0.0
        if peak > self.epsilon + BUDGET_TOL:
            raise DataError(f"pack violates l-inf budget: max|delta|={peak:.8g} > "
                            f"epsilon={self.epsilon:.8g} (+{BUDGET_TOL:g})")

    @property
    def m(self):
        return self.deltas.shape[0]


def write_poison_pack(pack, path):
    """PZN1 container: magic, version u8, mode u8 (0 class / 1 sample),
    epsilon f32 LE, K m C H W u64 LE, provenance u64-len + utf-8, deltas f32
    LE row-major, then m original indices u64 LE for sample_wise packs."""
    pack.validate()
    m, c, h, w = pack.deltas.shape
    with open(path, "wb") as fh:
        fh.write(PACK_MAGIC)
        fh.write(struct.pack("<B", PACK_VERSION))
        fh.write(struct.pack("<B", 0 if pack.mode == CLASS_WISE else 1))
        fh.write(struct.pack("<f", pack.epsilon))
        fh.write(struct.pack("<5Q", pack.num_classes, m, c, h, w))
        src = pack.source.encode("utf-8")
        fh.write(struct.pack("<Q", len(src)))
        fh.write(src)
        fh.write(np.ascontiguousarray(pack.deltas, dtype="<f4").tobytes())
        if pack.mode == SAMPLE_WISE:
            fh.write(np.ascontiguousarray(pack.orig_indices, dtype="<u8").tobytes())


def read_poison_pack(path):
    raw = Path(path).read_bytes()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise DataError(f"truncated poison pack '{path}'")
        chunk = raw[off : off + n]
        off += n
        return chunk

    if take(4) != PACK_MAGIC:
        raise DataError(f"bad poison pack magic in '{path}'")
    version = take(1)[0]
    if version != PACK_VERSION:
        raise DataError(f"unsupported poison pack version {version}")
    mode_byte = take(1)[0]
    if mode_byte not in (0, 1):
        raise DataError(f"bad mode byte {mode_byte} in '{path}'")
    mode = CLASS_WISE if mode_byte == 0 else SAMPLE_WISE
    (epsilon,) = struct.unpack("<f", take(4))
    k, m, c, h, w = struct.unpack("<5Q", take(40))
    (src_len,) = struct.unpack("<Q", take(8))
    source = take(src_len).decode("utf-8")
    deltas = np.frombuffer(take(4 * m * c * h * w), dtype="<f4").reshape(m, c, h, w).copy()
    indices = None
    if mode == SAMPLE_WISE:
        indices = np.frombuffer(take(8 * m), dtype="<u8").astype(np.int64)
    if off != len(raw):
        raise DataError(f"trailing bytes in poison pack '{path}'")
    return PoisonPack(mode=mode, epsilon=epsilon, deltas=deltas, source=source,
                      num_classes=k, orig_indices=indices)
