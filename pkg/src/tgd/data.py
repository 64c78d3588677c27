"""Datasets, persistence-image caches and index-aligned batching.

Images are kept as ``(n, 32, 32, 3)`` uint8 arrays in HWC order.  Every sample
carries a stable integer index so that raw images and cached persistence
images can be joined without relying on storage order.
"""

from __future__ import annotations

import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tda
from .errors import AlignmentError, DataError, FormatError, ParameterError, TruncationError
from .tda import PiParams
from .tensor import atomic_write

CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)

PI_MAGIC = b"TGDPI1"
_PI_HEADER = struct.Struct("<6sIII6d")


@dataclass
class Sample:
    index: int
    raw: np.ndarray
    label: int
    pi: np.ndarray | None = None


@dataclass
class Dataset:
    images: np.ndarray  # (n, h, w, 3) uint8
    labels: np.ndarray  # (n,) int64
    indices: np.ndarray  # (n,) int64
    num_classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if not (len(self.images) == len(self.labels) == len(self.indices)):
            raise DataError("images, labels and indices must have equal length")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, pos: int) -> Sample:
        return Sample(int(self.indices[pos]), self.images[pos], int(self.labels[pos]))

    def subset(self, positions) -> Dataset:
        positions = np.asarray(positions, dtype=np.int64)
        return Dataset(self.images[positions], self.labels[positions], self.indices[positions], self.num_classes)

    def inputs(self, positions=None) -> np.ndarray:
        """Network inputs: float32 NHWC scaled to [0, 1]."""
        imgs = self.images if positions is None else self.images[positions]
        return imgs.astype(np.float32) / np.float32(255.0)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


# ---------------------------------------------------------------------------
# CIFAR-10 binary format


def _parse_cifar(buf: bytes, name: str, start_index: int):
    if len(buf) % CIFAR_RECORD:
        raise FormatError(f"{name}: trailing partial record, file length {len(buf)} is not a multiple of {CIFAR_RECORD}", len(buf) - len(buf) % CIFAR_RECORD)
    recs = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"{name}: label byte {labels[bad[0]]} out of range", int(bad[0]) * CIFAR_RECORD)
    images = recs[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels, start_index + np.arange(len(labels), dtype=np.int64)


def _balanced_prefix(labels: np.ndarray, subset_size: int, num_classes: int) -> np.ndarray:
    if subset_size % num_classes:
        raise ParameterError(f"subset_size {subset_size} is not divisible by {num_classes} classes")
    per_class = subset_size // num_classes
    picks = []
    for c in range(num_classes):
        pos = np.flatnonzero(labels == c)[:per_class]
        if len(pos) < per_class:
            raise DataError(f"class {c} has only {len(pos)} samples, {per_class} requested")
        picks.append(pos)
    return np.sort(np.concatenate(picks))


def load_cifar10(path, subset_size: int | None = None, split: str = "train") -> Dataset:
    """Read CIFAR-10 binary batches from a directory (or a single ``.bin`` file).

    With ``subset_size`` the first ``subset_size / 10`` samples of every
    class are kept, in file order.
    """
    path = Path(path)
    if path.is_file():
        files = [path]
    else:
        names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
        files = [path / n for n in names if (path / n).exists()]
        if not files:
            raise DataError(f"no CIFAR-10 {split} batch files under {path}")
    parts, start = [], 0
    for f in files:
        imgs, labels, idx = _parse_cifar(f.read_bytes(), str(f), start)
        parts.append((imgs, labels, idx))
        start += len(labels)
    ds = Dataset(
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
        np.concatenate([p[2] for p in parts]),
        num_classes=10,
    )
    if subset_size is not None:
        ds = ds.subset(_balanced_prefix(ds.labels, subset_size, ds.num_classes))
    return ds


def write_cifar10(path, dataset: Dataset):
    """Export 32x32 RGB samples as CIFAR-10 binary records."""
    if dataset.images.shape[1:] != (32, 32, 3):
        raise DataError(f"CIFAR records hold 32x32x3 images, got {dataset.images.shape[1:]}")
    if dataset.labels.max(initial=0) > 255:
        raise DataError("labels must fit in one byte")
    recs = np.empty((len(dataset), CIFAR_RECORD), dtype=np.uint8)
    recs[:, 0] = dataset.labels
    recs[:, 1:] = dataset.images.transpose(0, 3, 1, 2).reshape(len(dataset), -1)
    atomic_write(path, recs.tobytes())


# ---------------------------------------------------------------------------
# Synthetic datasets


def _bars_image(rng, cls, num_classes, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = np.pi * cls / num_classes + rng.normal(0, 0.05)
    # signed distance along the bar normal
    dist = (xx - size / 2) * np.cos(theta) + (yy - size / 2) * np.sin(theta)
    period = rng.uniform(7.0, 11.0)
    phase = rng.uniform(0, period)
    width = rng.uniform(1.5, 3.0)
    mask = np.abs(((dist + phase) % period) - period / 2) < width / 2
    return mask.astype(np.float64)


def _blobs_image(rng, cls, num_classes, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size))
    for _ in range(cls + 1):
        cy, cx = rng.uniform(5, size - 5, 2)
        r = rng.uniform(2.0, 3.5)
        img = np.maximum(img, np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r)))
    return img


def gen_synthetic(
    kind: str = "bars",
    n: int = 1000,
    seed: int = 0,
    num_classes: int = 4,
    noise: float = 0.08,
    size: int = 32,
) -> Dataset:
    """Class-dependent geometric patterns with per-pixel Gaussian noise.

    ``bars``: stripes whose orientation is ``pi * class / num_classes``.
    ``blobs``: ``class + 1`` Gaussian blobs at random positions.
    Foreground and background colours are drawn per image.
    """
    if kind not in ("bars", "blobs"):
        raise ParameterError(f"unknown synthetic kind {kind!r}")
    if num_classes < 2 or n < 1:
        raise ParameterError("need at least two classes and one sample")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes)
    draw = _bars_image if kind == "bars" else _blobs_image
    images = np.empty((n, size, size, 3), dtype=np.uint8)
    for k, cls in enumerate(labels):
        pattern = draw(rng, int(cls), num_classes, size)[..., None]
        fg = rng.uniform(0.55, 1.0, 3)
        bg = rng.uniform(0.0, 0.35, 3)
        img = bg + (fg - bg) * pattern + rng.normal(0.0, noise, (size, size, 3))
        images[k] = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    return Dataset(images, labels, np.arange(n), num_classes=num_classes)


def flip_labels(dataset: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """Copy of ``dataset`` with ``round(fraction * n)`` labels moved to a different class."""
    rng = np.random.default_rng(seed)
    n = len(dataset)
    pos = rng.choice(n, size=int(round(fraction * n)), replace=False)
    labels = dataset.labels.copy()
    shift = rng.integers(1, dataset.num_classes, size=len(pos))
    labels[pos] = (labels[pos] + shift) % dataset.num_classes
    return Dataset(dataset.images, labels, dataset.indices, dataset.num_classes)


def split(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded random split; returns ``(rest, held_out)`` with ``fraction`` held out."""
    perm = np.random.default_rng(seed).permutation(len(dataset))
    k = int(round(fraction * len(dataset)))
    return dataset.subset(np.sort(perm[k:])), dataset.subset(np.sort(perm[:k]))


# ---------------------------------------------------------------------------
# Persistence-image cache


@dataclass
class PiCache:
    params: PiParams
    indices: np.ndarray  # (n,) sample indices
    labels: np.ndarray  # (n,)
    grids: np.ndarray  # (n, c, g, g) float32, channel-major

    def __len__(self) -> int:
        return len(self.indices)

    def record_size(self) -> int:
        c, g = self.grids.shape[1], self.grids.shape[2]
        return 5 + 4 * g * g * c


def _record_dtype(c: int, g: int) -> np.dtype:
    return np.dtype([("index", "<u4"), ("label", "u1"), ("pi", "<f4", (c, g, g))])


def _extract_chunk(args):
    images, params = args
    return tda.extract_pi_batch(images, params)


def build_pi_cache(dataset: Dataset, params: PiParams | None = None, path=None, workers: int = 1) -> PiCache:
    """Extract persistence images for every sample and optionally write the cache file.

    Samples are independent, so ``workers > 1`` splits the work across
    processes; results are reassembled in sample order.
    """
    params = params or PiParams()
    if workers > 1 and len(dataset) > 1:
        chunks = np.array_split(dataset.images, workers)
        with ProcessPoolExecutor(workers) as pool:
            grids = np.concatenate(list(pool.map(_extract_chunk, [(c, params) for c in chunks])))
    else:
        grids = tda.extract_pi_batch(dataset.images, params)
    cache = PiCache(params, dataset.indices.copy(), dataset.labels.copy(), grids)
    if path is not None:
        write_pi_cache(path, cache)
    return cache


def pi_cache_bytes(cache: PiCache) -> bytes:
    p = cache.params
    n, c, g, _ = cache.grids.shape
    header = _PI_HEADER.pack(PI_MAGIC, n, g, c, *p.birth_range, *p.lifetime_range, p.std, p.lifetime_threshold)
    recs = np.empty(n, dtype=_record_dtype(c, g))
    recs["index"] = cache.indices
    recs["label"] = cache.labels
    recs["pi"] = cache.grids
    return header + recs.tobytes()


def write_pi_cache(path, cache: PiCache):
    atomic_write(path, pi_cache_bytes(cache))


def read_pi_cache(path, dataset: Dataset | None = None) -> PiCache:
    """Load a cache, validating its layout and (optionally) its labels against ``dataset``."""
    buf = Path(path).read_bytes()
    if len(buf) < _PI_HEADER.size:
        raise TruncationError(f"{path}: shorter than the cache header", len(buf))
    magic, n, g, c, b_lo, b_hi, l_lo, l_hi, sigma, thr = _PI_HEADER.unpack_from(buf)
    if magic != PI_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", 0)
    if c not in (3, 6):
        raise FormatError(f"{path}: unsupported channel count {c}", 14)
    dtype = _record_dtype(c, g)
    expected = _PI_HEADER.size + n * dtype.itemsize
    if len(buf) < expected:
        raise TruncationError(f"{path}: {n} records declared but file ends early", len(buf))
    if len(buf) > expected:
        raise FormatError(f"{path}: {len(buf) - expected} unexpected trailing bytes", expected)
    recs = np.frombuffer(buf, dtype=dtype, offset=_PI_HEADER.size, count=n)
    grids = np.array(recs["pi"], dtype=np.float32)
    ok = np.isfinite(grids).all(axis=(1, 2, 3)) & (grids >= 0).all(axis=(1, 2, 3))
    if not ok.all():
        bad = int(np.flatnonzero(~ok)[0])
        raise FormatError(f"{path}: record {bad} holds negative or non-finite values", _PI_HEADER.size + bad * dtype.itemsize)
    params = PiParams(
        grid_size=g,
        birth_range=(b_lo, b_hi),
        lifetime_range=(l_lo, l_hi),
        sigma=sigma,
        lifetime_threshold=thr,
        channel_mode=tda.ROW_ONLY if c == 3 else tda.ROW_AND_COL,
    )
    cache = PiCache(params, recs["index"].astype(np.int64), recs["label"].astype(np.int64), grids)
    if dataset is not None:
        align_pis(dataset, cache)
    return cache


def align_pis(dataset: Dataset, cache: PiCache) -> np.ndarray:
    """Persistence images reordered to match ``dataset``, as NHWC float32.

    Raises :class:`AlignmentError` when an index is missing or a label differs.
    """
    lookup = {int(i): k for k, i in enumerate(cache.indices)}
    try:
        pos = np.array([lookup[int(i)] for i in dataset.indices], dtype=np.int64)
    except KeyError as exc:
        raise AlignmentError(f"no persistence image cached for sample index {exc.args[0]}") from None
    mismatch = np.flatnonzero(cache.labels[pos] != dataset.labels)
    if mismatch.size:
        k = int(mismatch[0])
        raise AlignmentError(
            f"label mismatch for sample index {int(dataset.indices[k])}: raw {int(dataset.labels[k])}, cached {int(cache.labels[pos[k]])}"
        )
    return np.ascontiguousarray(cache.grids[pos].transpose(0, 2, 3, 1))


# ---------------------------------------------------------------------------
# Batching


@dataclass(frozen=True)
class BatchPlan:
    seed: int = 0
    batch_size: int = 128
    drop_last: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError("batch_size must be positive")

    def permutation(self, epoch: int, n: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(n)

    def batches(self, epoch: int, n: int) -> list[np.ndarray]:
        perm = self.permutation(epoch, n)
        b = self.batch_size
        stop = n - n % b if self.drop_last else n
        return [perm[i : i + b] for i in range(0, stop, b)]


def aligned_batches(dataset: Dataset, cache: PiCache | np.ndarray | None, plan: BatchPlan, epoch: int = 0) -> Iterator[tuple]:
    """Yield ``(raw, pi, labels, positions)`` batches sharing one permutation.

    ``cache`` may be a :class:`PiCache` or an array already aligned with
    :func:`align_pis`; ``pi`` is ``None`` when no cache is given.
    """
    pis = align_pis(dataset, cache) if isinstance(cache, PiCache) else cache
    for pos in plan.batches(epoch, len(dataset)):
        yield dataset.inputs(pos), (None if pis is None else pis[pos]), dataset.labels[pos], pos
