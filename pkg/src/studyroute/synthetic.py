"""Synthetic study corpora built from a mapping database, with matching oracle backends."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Union

import numpy as np

from studyroute.calibration import CalibrationModel
from studyroute.evaluation import GroundTruth
from studyroute.imaging import OracleBackend, build_input, input_fingerprint, normalize_intensity
from studyroute.ingest import write_series_files
from studyroute.mapping_db import MappingDatabase
from studyroute.model import Modality, SeriesRecord, StudyBundle

# classes the image networks never learned; only metadata can predict them
NETWORK_UNTRAINED = frozenset({"DSA_BRAIN_VESSELS", "CONV_SPINE"})
NETWORK_MODALITIES = (Modality.CT, Modality.CR, Modality.MR, Modality.US, Modality.XA)
_CR_MAMMAE = "CONV_MAMMAE"


@dataclass
class SyntheticCorpus:
    intact: list[StudyBundle]
    scrubbed: list[StudyBundle]
    truth: dict[str, GroundTruth]
    backends: dict[Modality, OracleBackend]


def backend_class_lists(db: MappingDatabase) -> dict[Modality, list[str]]:
    lists = {}
    for mod in NETWORK_MODALITIES:
        lists[mod] = [cid for cid in db.classes_for_modality(mod) if cid not in NETWORK_UNTRAINED]
    return lists


def _network_target(truth: str, db: MappingDatabase) -> tuple[Modality, str]:
    """Backend modality and the class the oracle should predict for a series of ``truth``."""
    cls = db.get_class(truth)
    if cls.modality is Modality.MG:
        return Modality.CR, _CR_MAMMAE
    if cls.is_pet_variant:
        base = truth[len("PET_") :]
        return db.get_class(base).modality, base
    return cls.modality, truth


def _volume(rng: np.random.Generator, series_index: int) -> np.ndarray:
    # mix thin stacks and MIP-sized volumes; tiny XY keeps preprocessing cheap
    z = (1, 7, 24, 48)[series_index % 4]
    y, x = rng.integers(6, 14, size=2)
    return rng.integers(0, 4096, size=(z, y, x)).astype(np.uint16)


def _series_metadata(kind: int, keyword: str) -> tuple[str, dict[str, str]]:
    if kind == 0:
        return keyword, {}
    return f"AX {kind}", {"ProtocolName": keyword}


def make_corpus(db: MappingDatabase, n_studies: int = 200, seed: int = 0) -> SyntheticCorpus:
    """Studies cycling through the ways metadata can identify a class.

    Study i carries, by i mod 4: a procedure code; a study description equal
    to the display name; a noisy study description around a keyword; or only
    series-level keywords. The scrubbed copy strips every text field so only
    pixel data remains. Oracle backends peak on the truth's network class.
    """
    rng = np.random.default_rng(seed)
    classes = [c.class_id for c in db.classes]
    lists = backend_class_lists(db)
    tables: dict[Modality, dict[int, list[float]]] = {m: {} for m in lists}
    codes = {}
    for code, cid in db.procedure_codes.items():
        codes.setdefault(cid, code)

    intact, scrubbed, truth = [], [], {}
    for i in range(n_studies):
        cid = classes[int(rng.integers(len(classes)))]
        cls = db.get_class(cid)
        keyword = db.keywords[cid][int(rng.integers(len(db.keywords[cid])))]
        study_uid = f"1.2.826.0.1.3680043.10.999.{seed}.{i + 1}"
        backend_mod, net_class = _network_target(cid, db)
        series_mod = Modality.MG if cls.modality is Modality.MG else backend_mod

        series = []
        n_series = int(rng.integers(1, 4))
        for j in range(n_series):
            desc, extra = _series_metadata(j % 2, keyword)
            vol = _volume(rng, i + j)
            series.append(SeriesRecord(f"{study_uid}.{j + 1}", series_mod, desc, extra, vol))
            fp = input_fingerprint(build_input(normalize_intensity(vol)))
            logits = np.full(len(lists[backend_mod]), -2.0) + rng.normal(0, 0.3, len(lists[backend_mod]))
            target = lists[backend_mod].index(net_class) if net_class in lists[backend_mod] else 0
            logits[target] = 3.0 + rng.random()
            tables[backend_mod][fp] = logits.tolist()
        if cls.is_pet_variant:
            pet = rng.integers(0, 4096, size=(7, 8, 8)).astype(np.uint16)
            series.append(SeriesRecord(f"{study_uid}.99", Modality.PT, "PET AC", {}, pet))

        kind = i % 4
        bundle = StudyBundle(
            study_uid=study_uid,
            study_modality=cls.modality,
            procedure_code=codes.get(cid) if kind == 0 else None,
            study_description={1: cls.display_name, 2: f"EXT {keyword} 2021"}.get(kind),
            series=tuple(
                s if kind == 3 or s.modality is Modality.PT else replace(s, series_description=None, extra_meta={})
                for s in series
            ),
        )
        intact.append(bundle)
        scrubbed.append(
            replace(
                bundle,
                procedure_code=None,
                study_description=None,
                series=tuple(replace(s, series_description=None, extra_meta={}) for s in series),
            )
        )
        truth[study_uid] = GroundTruth(study_uid, frozenset({cid}))

    backends = {
        mod: OracleBackend(mod, lists[mod], tables[mod], CalibrationModel(1.0, len(lists[mod])))
        for mod in lists
    }
    return SyntheticCorpus(intact, scrubbed, truth, backends)


def write_dicom_corpus(bundles: list[StudyBundle], directory: Union[str, Path]) -> None:
    directory = Path(directory)
    for b in bundles:
        for s in b.series:
            write_series_files(directory / b.study_uid / s.series_uid, b, s)


def write_truth_csv(truth: dict[str, GroundTruth], path: Union[str, Path]) -> None:
    lines = ["study_uid,labels"]
    lines += [f"{uid},{'|'.join(sorted(t.labels))}" for uid, t in sorted(truth.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
