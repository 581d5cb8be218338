"""Image preprocessing and the pluggable per-modality classifier backends."""

from __future__ import annotations

import abc
import csv
import enum
import functools
import hashlib
import importlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np
from scipy.interpolate import make_interp_spline

from studyroute.calibration import CalibrationModel, scaled_probabilities
from studyroute.mapping_db import MappingDatabase
from studyroute.model import LayerKind, Modality, SeriesRecord, StudyBundle, Vote, VoteSet, VoteSource, pet_counterpart

TARGET = 512
MIN_3D_SLICES = 40
MAMMOGRAPHY_CLASS = "MAMMOGRAPHY"
_Z_CHUNK = 16


class RoutingError(ValueError):
    """A series was handed to a backend for a different modality."""


class SourceKind(str, enum.Enum):
    STACK_2D = "Stack2D"
    MIP_3D = "Mip3D"


@dataclass(frozen=True, eq=False)
class PreprocessedInput:
    channels: np.ndarray  # (3, 512, 512), values in [0, 1]
    source_kind: SourceKind

    def __post_init__(self) -> None:
        if self.channels.shape != (3, TARGET, TARGET):
            raise ValueError(f"channels must have shape (3, {TARGET}, {TARGET}), got {self.channels.shape}")


def normalize_intensity(volume: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant volume maps to zeros."""
    v = np.asarray(volume, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


@functools.lru_cache(maxsize=256)
def _spline_matrix(m: int, n: int) -> np.ndarray:
    """(n, m) matrix mapping m samples to n spline-interpolated ones.

    Spline interpolation is linear in the data, so interpolating the identity
    gives the operator once per size pair.
    """
    spline = make_interp_spline(np.arange(m, dtype=np.float64), np.eye(m), k=min(3, m - 1), axis=0)
    w = spline(np.linspace(0.0, m - 1.0, n))
    w.setflags(write=False)
    return w


def _resample_axis(a: np.ndarray, n: int, axis: int) -> np.ndarray:
    m = a.shape[axis]
    if m == n:
        return a
    if m == 1:
        return np.repeat(a, n, axis=axis)
    w = _spline_matrix(m, n)
    return np.moveaxis(np.tensordot(w, a, axes=([1], [axis])), 0, axis)


def resample_plane(plane: np.ndarray, target: tuple[int, int] = (TARGET, TARGET)) -> np.ndarray:
    """Cubic-spline resampling onto a uniform grid spanning the original extent, clamped to [0, 1]."""
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2 or plane.shape[0] < 2 or plane.shape[1] < 2:
        raise ValueError(f"plane must be 2-D with both dims >= 2, got shape {plane.shape}")
    out = np.array(_resample_axis(_resample_axis(plane, target[0], 0), target[1], 1))
    np.maximum(out, 0.0, out=out)
    np.minimum(out, 1.0, out=out)
    return out


def _to_plane(plane: np.ndarray) -> np.ndarray:
    # size-1 axes carry no spatial information; stretch them to the target by repetition
    if plane.shape[0] == 1:
        plane = np.repeat(plane, TARGET, axis=0)
    if plane.shape[1] == 1:
        plane = np.repeat(plane, TARGET, axis=1)
    return resample_plane(plane)


def projections(volume: np.ndarray, z_target: int = TARGET) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Max projections along Z, Y and X of the volume after Z-resampling to ``z_target``.

    Works through the volume in row blocks so the resampled volume is never
    held in memory at once.
    """
    z, y, x = volume.shape
    mip_z = np.empty((y, x))
    mip_y = np.full((z_target, x), -np.inf)
    mip_x = np.empty((z_target, y))
    for start in range(0, y, _Z_CHUNK):
        block = _resample_axis(volume[:, start : start + _Z_CHUNK, :], z_target, 0)
        mip_z[start : start + block.shape[1]] = block.max(axis=0)
        np.maximum(mip_y, block.max(axis=1), out=mip_y)
        mip_x[:, start : start + block.shape[1]] = block.max(axis=2)
    return mip_z, mip_y, mip_x


def build_input(volume: np.ndarray) -> PreprocessedInput:
    """Turn a normalized (Z, Y, X) volume into three 512x512 channels.

    Thin stacks (Z < 40) use the first, middle and last slice; anything thicker
    is resampled to 512 slices and summarized by max projections along Z, Y, X.
    """
    vol = np.asarray(volume, dtype=np.float64)
    z = vol.shape[0]
    if z < MIN_3D_SLICES:
        planes = [vol[i] for i in (0, (z - 1) // 2, z - 1)]
        kind = SourceKind.STACK_2D
    else:
        planes = list(projections(vol))
        kind = SourceKind.MIP_3D
    channels = np.stack([_to_plane(p) for p in planes])
    return PreprocessedInput(channels, kind)


def input_fingerprint(inp: PreprocessedInput) -> int:
    """Decimal 64-bit fingerprint: first 16 hex digits of SHA-256 over the channels quantized to uint8."""
    quantized = np.round(inp.channels * 255.0).astype(np.uint8)
    digest = hashlib.sha256(quantized.tobytes()).hexdigest()
    return int(digest[:16], 16)


class ClassifierBackend(abc.ABC):
    """A per-modality image classifier.

    Subclasses provide ``infer``; logits must be ordered like ``class_list``.
    Backends that cannot take concurrent calls set ``thread_safe = False``.
    """

    thread_safe = True

    def __init__(self, modality: Modality, class_list: Sequence[str], calibration: Optional[CalibrationModel] = None):
        self.modality = Modality.parse(modality) if isinstance(modality, str) else modality
        self.class_list = tuple(class_list)
        self.calibration = calibration or CalibrationModel(1.0, len(self.class_list))

    @abc.abstractmethod
    def infer(self, inp: PreprocessedInput) -> np.ndarray:
        ...

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.modality.value}, {len(self.class_list)} classes, T={self.calibration.temperature:g})"


class CallableBackend(ClassifierBackend):
    """Wraps any callable ``PreprocessedInput -> logits`` (e.g. an externally trained model)."""

    def __init__(self, fn: Callable[[PreprocessedInput], Sequence[float]], modality, class_list, calibration=None):
        super().__init__(modality, class_list, calibration)
        self.fn = fn

    def infer(self, inp: PreprocessedInput) -> np.ndarray:
        return np.asarray(self.fn(inp), dtype=np.float64)


class OracleBackend(ClassifierBackend):
    """Table-driven backend for tests: input fingerprint -> fixed logits."""

    def __init__(self, modality, class_list, table: Mapping[int, Sequence[float]], calibration=None):
        super().__init__(modality, class_list, calibration)
        self.table = {int(k): np.asarray(v, dtype=np.float64) for k, v in table.items()}
        for fp, logits in self.table.items():
            if logits.shape != (len(self.class_list),):
                raise ValueError(f"fingerprint {fp}: expected {len(self.class_list)} logits, got {logits.shape}")

    def infer(self, inp: PreprocessedInput) -> np.ndarray:
        fp = input_fingerprint(inp)
        try:
            return self.table[fp]
        except KeyError:
            raise LookupError(f"oracle backend {self.modality.value} has no entry for fingerprint {fp}") from None

    @classmethod
    def from_csv(cls, path: Union[str, Path], calibration: Optional[CalibrationModel] = None) -> "OracleBackend":
        """Read a fixture file.

        Two comment lines name the backend, ``# modality: CT`` and
        ``# classes: A|B|C``; the remaining rows are
        ``volume_fingerprint,class_index,z_0,z_1,...``.
        """
        path = Path(path)
        modality = None
        classes: list[str] = []
        table = {}
        with path.open(encoding="utf-8", newline="") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    key, _, value = line[1:].partition(":")
                    if key.strip() == "modality":
                        modality = Modality.parse(value.strip())
                    elif key.strip() == "classes":
                        classes = [c.strip() for c in value.split("|") if c.strip()]
                    continue
                row = next(csv.reader([line]))
                try:
                    table[int(row[0])] = [float(v) for v in row[2:]]
                    int(row[1])
                except (ValueError, IndexError):
                    raise ValueError(f"{path}:{lineno}: malformed oracle row") from None
        if modality is None or not classes:
            raise ValueError(f"{path}: missing '# modality:' or '# classes:' header")
        return cls(modality, classes, table, calibration)

    def to_csv(self, path: Union[str, Path]) -> None:
        with Path(path).open("w", encoding="utf-8", newline="") as fh:
            fh.write(f"# modality: {self.modality.value}\n")
            fh.write(f"# classes: {'|'.join(self.class_list)}\n")
            w = csv.writer(fh)
            for fp in sorted(self.table):
                logits = self.table[fp]
                w.writerow([fp, int(np.argmax(logits))] + [repr(float(z)) for z in logits])


def load_backend(spec: str, calibration: Optional[CalibrationModel] = None) -> ClassifierBackend:
    """Load a backend from an oracle fixture path or a ``package.module:factory`` reference.

    The factory is called with no arguments and must return a ClassifierBackend.
    """
    if ":" in spec and not Path(spec).exists():
        module_name, _, attr = spec.partition(":")
        factory = getattr(importlib.import_module(module_name), attr)
        backend = factory()
        if not isinstance(backend, ClassifierBackend):
            raise TypeError(f"{spec} did not produce a ClassifierBackend")
        if calibration is not None:
            backend.calibration = calibration
        return backend
    return OracleBackend.from_csv(spec, calibration)


def _compatible(series_modality: Modality, backend_modality: Modality) -> bool:
    if series_modality == backend_modality:
        return True
    return series_modality is Modality.MG and backend_modality is Modality.CR


def classify_series(
    series: SeriesRecord,
    backend: ClassifierBackend,
    study_modality: Optional[Modality] = None,
    db: Optional[MappingDatabase] = None,
) -> Optional[Vote]:
    """One confidence-weighted vote for a series, or None without pixel data."""
    if not _compatible(series.modality, backend.modality):
        raise RoutingError(f"series {series.series_uid} ({series.modality.value}) routed to {backend.modality.value} backend")
    if series.pixel_volume is None:
        return None
    inp = build_input(normalize_intensity(series.pixel_volume))
    logits = np.asarray(backend.infer(inp), dtype=np.float64)
    if logits.shape != (len(backend.class_list),):
        raise ValueError(f"{backend!r} returned {logits.shape[0] if logits.ndim else 0} logits for {len(backend.class_list)} classes")
    probs = scaled_probabilities(logits, backend.calibration.temperature)
    top = int(np.argmax(logits))
    class_id = backend.class_list[top]
    if series.modality is Modality.MG:
        class_id = MAMMOGRAPHY_CLASS
    elif study_modality is Modality.PT and db is not None:
        class_id = pet_counterpart(class_id, db)
    return Vote(class_id, float(probs[top]), VoteSource.NETWORK, series.series_uid)


def backend_for(modality: Modality, backends: Mapping[Modality, ClassifierBackend]) -> Optional[ClassifierBackend]:
    if modality is Modality.PT:
        return None
    if modality is Modality.MG:
        return backends.get(Modality.CR)
    return backends.get(modality)


def network_vote_set(
    study: StudyBundle, backends: Mapping[Modality, ClassifierBackend], db: Optional[MappingDatabase] = None
) -> VoteSet:
    votes = []
    for series in study.series:
        backend = backend_for(series.modality, backends)
        if backend is None:
            continue
        vote = classify_series(series, backend, study.study_modality, db)
        if vote is not None:
            votes.append(vote)
    return VoteSet(votes, LayerKind.NETWORK_VOTE)
