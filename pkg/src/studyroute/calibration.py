"""Temperature scaling of classifier logits and expected calibration error."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

GRID_POINTS = 64
GOLDEN_RTOL = 1e-3
_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class LogitRecord:
    sample_id: str
    logits: tuple[float, ...]
    true_class: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "logits", tuple(float(z) for z in self.logits))
        if not all(math.isfinite(z) for z in self.logits):
            raise CalibrationError(f"{self.sample_id}: logits must be finite")
        if not 0 <= self.true_class < len(self.logits):
            raise CalibrationError(f"{self.sample_id}: true_class {self.true_class} out of range")


@dataclass(frozen=True)
class CalibrationModel:
    temperature: float = 1.0
    class_count: int = 0
    ece_bins: int = 10

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise CalibrationError(f"temperature must be positive, got {self.temperature}")
        if self.ece_bins < 1:
            raise CalibrationError(f"ece_bins must be >= 1, got {self.ece_bins}")


@dataclass(frozen=True)
class ReliabilityBin:
    bin_index: int
    count: int
    mean_confidence: float
    accuracy: float


def scaled_probabilities(logits: Sequence[float] | np.ndarray, T: float) -> np.ndarray:
    """Softmax of ``logits / T``. Works row-wise on 2-D input."""
    if not T > 0:
        raise CalibrationError(f"temperature must be positive, got {T}")
    z = np.asarray(logits, dtype=np.float64) / T
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_arrays(records: Sequence[LogitRecord]) -> tuple[np.ndarray, np.ndarray]:
    if len(records) == 0:
        raise CalibrationError("at least one logit record is required")
    logits = np.array([r.logits for r in records], dtype=np.float64)
    truth = np.array([r.true_class for r in records], dtype=np.int64)
    return logits, truth


def _confidences(logits: np.ndarray, truth: np.ndarray, T: float) -> tuple[np.ndarray, np.ndarray]:
    probs = scaled_probabilities(logits, T)
    pred = np.argmax(logits, axis=1)  # T-invariant; avoids argmax flips from rounding at huge T
    conf = probs[np.arange(len(pred)), pred]
    return conf, (pred == truth).astype(np.float64)


def bin_indices(confidences: np.ndarray, M: int) -> np.ndarray:
    """Zero-based bin of each confidence; bins are right-closed, 0 falls in the first bin."""
    idx = np.ceil(np.asarray(confidences) * M).astype(np.int64) - 1
    return np.clip(idx, 0, M - 1)


def _histogram(conf: np.ndarray, correct: np.ndarray, M: int) -> list[ReliabilityBin]:
    idx = bin_indices(conf, M)
    bins = []
    for m in range(M):
        mask = idx == m
        n = int(mask.sum())
        if n:
            bins.append(ReliabilityBin(m + 1, n, float(conf[mask].mean()), float(correct[mask].mean())))
        else:
            bins.append(ReliabilityBin(m + 1, 0, 0.0, 0.0))
    return bins


def ece_from_bins(bins: Sequence[ReliabilityBin]) -> float:
    n = sum(b.count for b in bins)
    total = 0.0
    for b in bins:
        if b.count:
            total += b.count / n * abs(b.accuracy - b.mean_confidence)
    return total


def reliability_histogram(records: Sequence[LogitRecord], T: float = 1.0, M: int = 10) -> list[ReliabilityBin]:
    logits, truth = _as_arrays(records)
    conf, correct = _confidences(logits, truth, T)
    return _histogram(conf, correct, M)


def compute_ece(records: Sequence[LogitRecord], T: float = 1.0, M: int = 10) -> float:
    """Bin-weighted mean gap between accuracy and mean top-1 confidence."""
    return ece_from_bins(reliability_histogram(records, T, M))


def _ece_arrays(logits: np.ndarray, truth: np.ndarray, T: float, M: int) -> float:
    conf, correct = _confidences(logits, truth, T)
    return ece_from_bins(_histogram(conf, correct, M))


def fit_temperature(
    records: Sequence[LogitRecord], M: int = 10, search: tuple[float, float] = (0.05, 20.0)
) -> CalibrationModel:
    """Pick T minimizing ECE over ``search``.

    A 64-point log-spaced grid locates the basin, then golden-section search
    refines between the neighbouring grid points. ECE is piecewise constant in
    T, so the best of grid point, refined point and T=1 is returned.
    """
    low, high = search
    if not 0 < low < high:
        raise CalibrationError(f"search interval must satisfy 0 < low < high, got {search}")
    logits, truth = _as_arrays(records)

    def ece(t: float) -> float:
        return _ece_arrays(logits, truth, t, M)

    grid = np.geomspace(low, high, GRID_POINTS)
    values = [ece(float(t)) for t in grid]
    k = int(np.argmin(values))
    candidates = [(values[k], float(grid[k]))]

    a = float(grid[max(k - 1, 0)])
    b = float(grid[min(k + 1, GRID_POINTS - 1)])
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = ece(c), ece(d)
    while (b - a) > GOLDEN_RTOL * 0.5 * (a + b):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = ece(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = ece(d)
        candidates += [(fc, c), (fd, d)]
    if low <= 1.0 <= high:
        candidates.append((ece(1.0), 1.0))
    best_value, best_t = min(candidates, key=lambda p: (p[0], abs(math.log(p[1]))))
    return CalibrationModel(temperature=best_t, class_count=logits.shape[1], ece_bins=M)


def read_logits_csv(path: Union[str, Path]) -> list[LogitRecord]:
    """Read ``sample_id,true_class_index,z_0,z_1,...`` rows (header required)."""
    path = Path(path)
    records = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise CalibrationError(f"{path}: empty file (header row required)")
        width = None
        for rowno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                if len(row) < 3:
                    raise ValueError("expected sample_id, true_class_index and at least one logit")
                logits = [float(c) for c in row[2:]]
                if width is not None and len(logits) != width:
                    raise ValueError(f"expected {width} logits, got {len(logits)}")
                width = len(logits)
                records.append(LogitRecord(row[0], tuple(logits), int(row[1])))
            except ValueError as exc:
                raise CalibrationError(f"{path}:{rowno}: {exc}") from None
    if not records:
        raise CalibrationError(f"{path}: no logit rows")
    return records


def write_logits_csv(path: Union[str, Path], records: Sequence[LogitRecord]) -> None:
    k = len(records[0].logits) if records else 0
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "true_class"] + [f"z_{i}" for i in range(k)])
        for r in records:
            w.writerow([r.sample_id, r.true_class] + [repr(z) for z in r.logits])
