"""Reading a directory of DICOM files into study bundles."""

from __future__ import annotations

import logging
import os
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np
import pydicom
from pydicom.errors import InvalidDicomError

from studyroute.mapping_db import DEFAULT_METADATA_KEYS
from studyroute.model import Modality, SeriesRecord, StudyBundle

log = logging.getLogger(__name__)


@dataclass
class IngestionReport:
    studies_found: int = 0
    series_found: int = 0
    series_skipped: list[tuple[str, str]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def _text(ds: pydicom.Dataset, keyword: str) -> Optional[str]:
    """Tag value as text; None when the tag is absent (an empty tag stays '')."""
    if keyword not in ds:
        return None
    value = ds.data_element(keyword).value
    if value is None:
        return ""
    if isinstance(value, (list, tuple, pydicom.multival.MultiValue)):
        return "\\".join(str(v) for v in value)
    return str(value)


def _procedure_code(ds: pydicom.Dataset) -> Optional[str]:
    seq = ds.get("ProcedureCodeSequence")
    if not seq:
        return None
    return _text(seq[0], "CodeValue")


def _read(path: Path) -> Union[pydicom.Dataset, Exception]:
    try:
        return pydicom.dcmread(str(path))
    except (InvalidDicomError, OSError, EOFError, ValueError, KeyError, TypeError) as exc:
        return exc


def _slice_key(ds: pydicom.Dataset) -> tuple:
    inst = ds.get("InstanceNumber")
    pos = ds.get("ImagePositionPatient")
    z = float(pos[2]) if pos is not None and len(pos) == 3 else 0.0
    return (int(inst) if inst is not None else 0, z, str(ds.get("SOPInstanceUID", "")))


def _as_planes(ds: pydicom.Dataset) -> np.ndarray:
    arr = np.asarray(ds.pixel_array)
    if int(ds.get("SamplesPerPixel", 1)) > 1:
        arr = arr.mean(axis=-1)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"unsupported pixel array shape {arr.shape}")
    return arr


def _series_volume(datasets: Sequence[pydicom.Dataset]) -> np.ndarray:
    planes = [_as_planes(ds) for ds in datasets if "PixelData" in ds]
    if not planes:
        raise ValueError("no pixel data")
    shapes = {p.shape[1:] for p in planes}
    if len(shapes) > 1:
        raise ValueError(f"inconsistent slice shapes {sorted(shapes)}")
    return np.concatenate(planes, axis=0)


def _first(datasets: Sequence[pydicom.Dataset], getter) -> Optional[str]:
    """First non-empty value across a series' files, else '' if any file had the tag, else None."""
    seen_empty = False
    for ds in datasets:
        value = getter(ds)
        if value:
            return value
        if value == "":
            seen_empty = True
    return "" if seen_empty else None


def _study_modality(series: Sequence[SeriesRecord]) -> Modality:
    mods = [s.modality for s in series]
    if Modality.PT in mods:
        return Modality.PT
    if not mods:
        return Modality.OT
    counts = Counter(mods)
    return min(counts, key=lambda m: (-counts[m], m.value))


def ingest_directory(
    path: Union[str, Path],
    metadata_keys: Sequence[str] = DEFAULT_METADATA_KEYS,
    workers: int = 1,
) -> tuple[list[StudyBundle], IngestionReport]:
    """Group DICOM files below ``path`` into StudyBundles.

    Files are grouped by Study Instance UID, then Series Instance UID. Pixel
    data that cannot be decoded leaves the series metadata-only and is listed
    in ``series_skipped``.
    """
    root = Path(path)
    if not root.is_dir():
        raise OSError(f"not a readable directory: {root}")
    files = sorted(p for p in root.rglob("*") if p.is_file())
    report = IngestionReport()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_read, files))
    else:
        results = [_read(f) for f in files]

    grouped: dict[str, dict[str, list[pydicom.Dataset]]] = defaultdict(lambda: defaultdict(list))
    for f, ds in zip(files, results):
        if isinstance(ds, Exception):
            log.debug("skipping %s: %s", f, ds)
            continue
        study_uid = _text(ds, "StudyInstanceUID")
        series_uid = _text(ds, "SeriesInstanceUID")
        if not study_uid or not series_uid:
            report.warnings.append(f"{os.path.relpath(f, root)}: missing Study/Series Instance UID, ignored")
            continue
        grouped[study_uid][series_uid].append(ds)

    if not grouped:
        report.warnings.append(f"no DICOM files found under {root}")
        return [], report

    extra_keys = [k for k in metadata_keys if k != "SeriesDescription"]
    bundles = []
    for study_uid in sorted(grouped):
        series_records = []
        study_files: list[pydicom.Dataset] = []
        for series_uid in sorted(grouped[study_uid]):
            datasets = sorted(grouped[study_uid][series_uid], key=_slice_key)
            study_files.extend(datasets)
            extra = {}
            for key in extra_keys:
                value = _first(datasets, lambda ds, k=key: _text(ds, k))
                if value is not None:
                    extra[key] = value
            volume = None
            if any("PixelData" in ds for ds in datasets):
                try:
                    volume = _series_volume(datasets)
                except Exception as exc:  # any decoder failure leaves the series metadata-only
                    report.series_skipped.append((series_uid, f"pixel data not decodable: {exc}"))
            series_records.append(
                SeriesRecord(
                    series_uid=series_uid,
                    modality=Modality.parse(_first(datasets, lambda ds: _text(ds, "Modality"))),
                    series_description=_first(datasets, lambda ds: _text(ds, "SeriesDescription")),
                    extra_meta=extra,
                    pixel_volume=volume,
                )
            )
        bundles.append(
            StudyBundle(
                study_uid=study_uid,
                study_modality=_study_modality(series_records),
                procedure_code=_first(study_files, _procedure_code),
                study_description=_first(study_files, lambda ds: _text(ds, "StudyDescription")),
                series=tuple(series_records),
            )
        )
        report.series_found += len(series_records)
    report.studies_found = len(bundles)
    return bundles, report


def write_series_files(
    directory: Union[str, Path],
    study: StudyBundle,
    series: SeriesRecord,
    extra_study_tags: Optional[dict[str, Any]] = None,
) -> list[Path]:
    """Write one DICOM file per slice of ``series`` (uint16 pixels; metadata only without a volume)."""
    from pydicom.dataset import FileMetaDataset
    from pydicom.sequence import Sequence as DicomSequence
    from pydicom.uid import ExplicitVRLittleEndian, SecondaryCaptureImageStorage, generate_uid

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    volume = series.pixel_volume
    n_files = volume.shape[0] if volume is not None else 1
    written = []
    for k in range(n_files):
        sop_uid = generate_uid(entropy_srcs=[study.study_uid, series.series_uid, str(k)])
        meta = FileMetaDataset()
        meta.MediaStorageSOPClassUID = SecondaryCaptureImageStorage
        meta.MediaStorageSOPInstanceUID = sop_uid
        meta.TransferSyntaxUID = ExplicitVRLittleEndian
        ds = pydicom.Dataset()
        ds.file_meta = meta
        ds.SOPClassUID = SecondaryCaptureImageStorage
        ds.SOPInstanceUID = sop_uid
        ds.StudyInstanceUID = study.study_uid
        ds.SeriesInstanceUID = series.series_uid
        ds.Modality = series.modality.value
        ds.InstanceNumber = k + 1
        if study.study_description is not None:
            ds.StudyDescription = study.study_description
        if study.procedure_code is not None:
            item = pydicom.Dataset()
            item.CodeValue = study.procedure_code
            item.CodingSchemeDesignator = "LOCAL"
            ds.ProcedureCodeSequence = DicomSequence([item])
        if series.series_description is not None:
            ds.SeriesDescription = series.series_description
        for key, value in series.extra_meta.items():
            setattr(ds, key, value)
        for key, value in (extra_study_tags or {}).items():
            setattr(ds, key, value)
        if volume is not None:
            plane = np.ascontiguousarray(volume[k], dtype=np.uint16)
            ds.Rows, ds.Columns = plane.shape
            ds.SamplesPerPixel = 1
            ds.PhotometricInterpretation = "MONOCHROME2"
            ds.BitsAllocated = 16
            ds.BitsStored = 16
            ds.HighBit = 15
            ds.PixelRepresentation = 0
            ds.PixelData = plane.tobytes()
        out = directory / f"{series.series_uid}_{k:04d}.dcm"
        ds.save_as(str(out), enforce_file_format=True)
        written.append(out)
    return written
