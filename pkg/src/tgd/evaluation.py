"""Accuracy, calibration, likelihood, blur corruption and similarity export."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset
from .distill import merge_maps, similarity_map
from .errors import DataError, DimensionError, ParameterError
from .nets import Net, predict_logits

log = logging.getLogger(__name__)

NOISE_LEVELS = {1: 0.5, 2: 1.0, 3: 1.5, 4: 2.0}
REPORT_KEYS = ("accuracy", "ece", "nll", "nll_clamped", "num_samples", "noise_level", "noise_seed", "checkpoint")


def accuracy_from_logits(logits: np.ndarray, labels) -> float:
    """Top-1 accuracy in percent; ties resolve to the lowest class index."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise DataError("accuracy of an empty dataset is undefined")
    if logits.shape[0] != len(labels):
        raise DimensionError(f"{logits.shape[0]} predictions for {len(labels)} labels")
    return float((logits.argmax(axis=1) == labels).mean() * 100.0)


def accuracy(model: Net, dataset: Dataset, inputs: np.ndarray | None = None) -> float:
    if len(dataset) == 0:
        raise DataError("accuracy of an empty dataset is undefined")
    x = dataset.inputs() if inputs is None else inputs
    return accuracy_from_logits(predict_logits(model, x), dataset.labels)


def probabilities(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_probs(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != len(labels):
        raise DimensionError(f"probabilities {probs.shape} do not match {len(labels)} labels")
    if len(labels) == 0:
        raise DataError("no samples")
    off = np.abs(probs.sum(axis=1) - 1.0)
    if (off > 1e-4).any() or (probs < 0).any():
        raise DataError(f"rows must be probability vectors (worst row sum error {off.max():.3g})")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise DataError("label out of range")
    return probs, labels


@dataclass
class CalibrationReport:
    ece: float
    nll: float
    bins: list[tuple[float, float, int]] = field(default_factory=list)  # (mean confidence, accuracy, count)
    clamped: int = 0


def calibration_bins(probs, labels, num_bins: int = 15) -> list[tuple[float, float, int]]:
    """Equal-width confidence bins over (0, 1]; bin ``k`` holds ``(k/B, (k+1)/B]``."""
    probs, labels = _check_probs(probs, labels)
    if num_bins < 1:
        raise ParameterError("num_bins must be positive")
    conf = probs.max(axis=1)
    correct = probs.argmax(axis=1) == labels
    idx = np.clip(np.ceil(conf * num_bins).astype(np.int64) - 1, 0, num_bins - 1)
    out = []
    for b in range(num_bins):
        m = idx == b
        n = int(m.sum())
        out.append((float(conf[m].mean()) if n else 0.0, float(correct[m].mean()) if n else 0.0, n))
    return out


def ece(probs, labels, num_bins: int = 15) -> float:
    """Expected calibration error in percent."""
    bins = calibration_bins(probs, labels, num_bins)
    total = sum(n for _, _, n in bins)
    return float(sum(n / total * abs(acc - c) for c, acc, n in bins) * 100.0)


def nll(probs, labels, return_clamped: bool = False):
    """Mean ``-log p(true class)`` times 100; probabilities are clamped at 1e-12."""
    probs, labels = _check_probs(probs, labels)
    p = probs[np.arange(len(labels)), labels]
    clamped = int((p < 1e-12).sum())
    if clamped:
        log.warning("nll: clamped %d zero probabilities", clamped)
    value = float(-np.log(np.maximum(p, 1e-12)).mean() * 100.0)
    return (value, clamped) if return_clamped else value


def calibration(probs, labels, num_bins: int = 15) -> CalibrationReport:
    value, clamped = nll(probs, labels, return_clamped=True)
    return CalibrationReport(ece(probs, labels, num_bins), value, calibration_bins(probs, labels, num_bins), clamped)


# ---------------------------------------------------------------------------
# Blur corruption


@dataclass(frozen=True)
class NoiseSpec:
    level: int = 1
    seed: int = 0
    sigma_min: float = 0.01
    kernel_size: int = 5
    additive: bool = False  # add pixel noise with the drawn sigma instead of blurring

    def __post_init__(self):
        if self.level not in NOISE_LEVELS:
            raise ParameterError(f"noise level must be one of {sorted(NOISE_LEVELS)}, got {self.level}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ParameterError("kernel_size must be odd and positive")

    @property
    def sigma_max(self) -> float:
        return NOISE_LEVELS[self.level]


def gaussian_kernel(sigma: float, size: int = 5) -> np.ndarray:
    """Normalised separable 1-D Gaussian taps of odd ``size``."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    r = np.arange(size, dtype=np.float64) - size // 2
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def gaussian_kernel_2d(sigma: float, size: int = 5) -> np.ndarray:
    k = gaussian_kernel(sigma, size)
    return np.outer(k, k)


def blur(image: np.ndarray, sigma: float, size: int = 5) -> np.ndarray:
    """Edge-replicating Gaussian blur of an ``(h, w, c)`` float image."""
    k = gaussian_kernel(sigma, size)
    r = size // 2
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    padded = np.pad(img, ((r, r), (0, 0), (0, 0)), mode="edge")
    rows = sum(k[i] * padded[i : i + h] for i in range(size))
    padded = np.pad(rows, ((0, 0), (r, r), (0, 0)), mode="edge")
    return sum(k[i] * padded[:, i : i + w] for i in range(size))


def corrupt_inputs(images: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """Corrupt float images in ``[0, 1]``; per-image sigma drawn from the seed."""
    images = np.asarray(images, dtype=np.float64)
    rng = np.random.default_rng(spec.seed)
    sigmas = rng.uniform(spec.sigma_min, spec.sigma_max, size=len(images))
    out = np.empty_like(images)
    for i, (img, s) in enumerate(zip(images, sigmas)):
        if spec.additive:
            out[i] = img + rng.normal(0.0, s, size=img.shape)
        else:
            out[i] = blur(img, s, spec.kernel_size)
    return np.clip(out, 0.0, 1.0)


def corrupt(dataset: Dataset, spec: NoiseSpec) -> Dataset:
    """A copy of ``dataset`` with corrupted images, requantised to uint8."""
    noisy = corrupt_inputs(dataset.inputs(), spec)
    images = np.round(noisy * 255.0).astype(np.uint8)
    return Dataset(images, dataset.labels.copy(), dataset.indices.copy(), dataset.num_classes)


# ---------------------------------------------------------------------------
# Reports and similarity export


def evaluate(model: Net, dataset: Dataset, noise: NoiseSpec | None = None, num_bins: int = 15, checkpoint: str = "") -> dict:
    """Report for raw-image models; ``noise`` corrupts the inputs first."""
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    inputs = dataset.inputs() if noise is None else corrupt_inputs(dataset.inputs(), noise).astype(np.float32)
    return evaluate_inputs(model, inputs, dataset.labels, noise, num_bins, checkpoint)


def evaluate_inputs(model: Net, inputs: np.ndarray, labels, noise: NoiseSpec | None = None, num_bins: int = 15, checkpoint: str = "") -> dict:
    """Report for already prepared network inputs (``noise`` is only recorded)."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    logits = predict_logits(model, inputs)
    probs = probabilities(logits)
    rep = calibration(probs, labels, num_bins)
    return {
        "accuracy": accuracy_from_logits(logits, labels),
        "ece": rep.ece,
        "nll": rep.nll,
        "nll_clamped": rep.clamped,
        "num_samples": len(labels),
        "noise_level": 0 if noise is None else noise.level,
        "noise_seed": None if noise is None else noise.seed,
        "checkpoint": str(checkpoint),
    }


def write_report(path, report: dict):
    missing = set(REPORT_KEYS) - set(report)
    if missing:
        raise DataError(f"report lacks keys {sorted(missing)}")
    T.atomic_write(path, json.dumps({k: report[k] for k in REPORT_KEYS}, indent=2) + "\n")


def pgm_bytes(matrix: np.ndarray) -> bytes:
    """8-bit binary PGM with per-matrix min-max scaling."""
    m = np.asarray(matrix, dtype=np.float64)
    lo, hi = float(m.min()), float(m.max())
    span = hi - lo
    scaled = np.zeros_like(m) if span == 0 else (m - lo) / span
    pixels = np.round(scaled * 255).astype(np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes()


def similarity_matrices(student: Net, teacher1: Net, teacher2: Net, raw_batch, pi_batch, layer: int, alpha: float) -> dict[str, np.ndarray]:
    """Raw (unnormalised) similarity maps of one tap for all three networks plus the merged map."""
    depth = min(student.spec.num_blocks, teacher1.spec.num_blocks, teacher2.spec.num_blocks)
    if not 0 <= layer < depth:
        raise ParameterError(f"layer must lie in [0, {depth}), got {layer}")
    with T.no_grad():
        maps = {
            "teacher1": similarity_map(teacher1.forward(T.Tensor(raw_batch)).block_features[layer], "teacher1", layer),
            "teacher2": similarity_map(teacher2.forward(T.Tensor(pi_batch)).block_features[layer], "teacher2", layer),
            "student": similarity_map(student.forward(T.Tensor(raw_batch)).block_features[layer], "student", layer),
        }
        maps["merged"] = merge_maps(maps["teacher1"], maps["teacher2"], alpha)
    return {k: maps[k].numpy() for k in ("teacher1", "teacher2", "merged", "student")}


def export_similarity(out_dir, matrices: dict[str, np.ndarray], fmt: str = "%.9g") -> list[Path]:
    """Write each matrix as ``<name>.csv`` and ``<name>.pgm`` in ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, m in matrices.items():
        lines = "".join(",".join(fmt % v for v in row) + "\n" for row in np.asarray(m))
        T.atomic_write(out_dir / f"{name}.csv", lines)
        T.atomic_write(out_dir / f"{name}.pgm", pgm_bytes(m))
        written += [out_dir / f"{name}.csv", out_dir / f"{name}.pgm"]
    return written


def block_contrast(matrix: np.ndarray, labels) -> tuple[float, float]:
    """Mean within-class and between-class off-diagonal entries."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    m = np.asarray(matrix)
    within = m[same & off]
    between = m[~same]
    return (float(within.mean()) if within.size else math.nan, float(between.mean()) if between.size else math.nan)
