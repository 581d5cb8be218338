"""Domain types shared across the routing engine."""

from __future__ import annotations

import base64
import enum
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Optional

import numpy as np

if TYPE_CHECKING:
    from studyroute.mapping_db import MappingDatabase


class RegistryError(KeyError):
    """Raised when a class token is not present in the mapping database."""


class Modality(str, enum.Enum):
    CT = "CT"
    CR = "CR"
    MR = "MR"
    US = "US"
    XA = "XA"
    MG = "MG"
    PT = "PT"
    OT = "OT"

    @classmethod
    def parse(cls, value: Optional[str]) -> "Modality":
        """Parse a DICOM modality string; unknown or missing values become OT."""
        if value is None:
            return cls.OT
        if isinstance(value, cls):
            return value
        token = str(value).strip().upper()
        token = _MODALITY_ALIASES.get(token, token)
        try:
            return cls(token)
        except ValueError:
            return cls.OT


_MODALITY_ALIASES = {
    "MRI": "MR",
    "DX": "CR",
    "DSA": "XA",
    "PET": "PT",
}


class VoteSource(str, enum.Enum):
    PROCEDURE_CODE = "ProcedureCode"
    STUDY_DESC_EXACT = "StudyDescExact"
    STUDY_DESC_PARTIAL = "StudyDescPartial"
    SERIES_META = "SeriesMeta"
    NETWORK = "Network"


class LayerKind(str, enum.Enum):
    """Decision steps a layer plan is built from."""

    PROC_CODE = "ProcCode"
    STUDY_DESC_EXACT = "StudyDescExact"
    STUDY_DESC_PARTIAL = "StudyDescPartial"
    SERIES_META_VOTE = "SeriesMetaVote"
    NETWORK_VOTE = "NetworkVote"
    MERGED_META_NETWORK_VOTE = "MergedMetaNetworkVote"
    MERGED = "Merged"


NETWORK_LAYERS = frozenset({LayerKind.NETWORK_VOTE, LayerKind.MERGED_META_NETWORK_VOTE})


def class_token(display_name: str) -> str:
    """Derive a stable class_id from a display name ("CT Skull + Neck" -> CT_SKULL_NECK)."""
    from studyroute.text_match import normalize_text

    return normalize_text(display_name).replace(" ", "_")


@dataclass(frozen=True)
class StudyClass:
    class_id: str
    display_name: str
    modality: Modality
    is_pet_variant: bool = False


@dataclass(frozen=True, eq=False)
class SeriesRecord:
    series_uid: str
    modality: Modality
    series_description: Optional[str] = None
    extra_meta: dict[str, str] = field(default_factory=dict)
    pixel_volume: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.pixel_volume is not None:
            vol = self.pixel_volume
            if vol.ndim != 3 or min(vol.shape) < 1:
                raise ValueError(f"pixel_volume must be 3-D with non-empty axes, got shape {vol.shape}")

    def meta_value(self, key: str) -> Optional[str]:
        if key == "SeriesDescription":
            return self.series_description
        return self.extra_meta.get(key)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SeriesRecord):
            return NotImplemented
        if (self.series_uid, self.modality, self.series_description) != (
            other.series_uid,
            other.modality,
            other.series_description,
        ):
            return False
        if list(self.extra_meta.items()) != list(other.extra_meta.items()):
            return False
        a, b = self.pixel_volume, other.pixel_volume
        if a is None or b is None:
            return a is b
        return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()

    __hash__ = None  # type: ignore[assignment]

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "series_uid": self.series_uid,
            "modality": self.modality.value,
            "series_description": self.series_description,
            "extra_meta": [[k, v] for k, v in self.extra_meta.items()],
            "pixel_volume": None,
        }
        if self.pixel_volume is not None:
            vol = np.ascontiguousarray(self.pixel_volume)
            d["pixel_volume"] = {
                "dtype": vol.dtype.str,
                "shape": list(vol.shape),
                "data": base64.b64encode(vol.tobytes()).decode("ascii"),
            }
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SeriesRecord":
        vol = None
        if d.get("pixel_volume") is not None:
            pv = d["pixel_volume"]
            raw = base64.b64decode(pv["data"])
            vol = np.frombuffer(raw, dtype=np.dtype(pv["dtype"])).reshape(pv["shape"]).copy()
        return cls(
            series_uid=d["series_uid"],
            modality=Modality(d["modality"]),
            series_description=d.get("series_description"),
            extra_meta={k: v for k, v in d.get("extra_meta", [])},
            pixel_volume=vol,
        )


@dataclass(frozen=True)
class StudyBundle:
    study_uid: str
    study_modality: Modality
    procedure_code: Optional[str] = None
    study_description: Optional[str] = None
    series: tuple[SeriesRecord, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "series", tuple(self.series))

    def series_by_uid(self, uid: str) -> Optional[SeriesRecord]:
        for s in self.series:
            if s.series_uid == uid:
                return s
        return None

    def to_dict(self) -> dict[str, Any]:
        return {
            "study_uid": self.study_uid,
            "study_modality": self.study_modality.value,
            "procedure_code": self.procedure_code,
            "study_description": self.study_description,
            "series": [s.to_dict() for s in self.series],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "StudyBundle":
        return cls(
            study_uid=d["study_uid"],
            study_modality=Modality(d["study_modality"]),
            procedure_code=d.get("procedure_code"),
            study_description=d.get("study_description"),
            series=tuple(SeriesRecord.from_dict(s) for s in d.get("series", [])),
        )


@dataclass(frozen=True)
class Vote:
    class_id: str
    weight: float
    source: VoteSource
    series_uid: Optional[str] = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "class_id": self.class_id,
            "weight": self.weight,
            "source": self.source.value,
            "series_uid": self.series_uid,
        }


@dataclass(frozen=True)
class VoteSet:
    votes: tuple[Vote, ...]
    layer: LayerKind

    def __post_init__(self) -> None:
        object.__setattr__(self, "votes", tuple(self.votes))

    def __len__(self) -> int:
        return len(self.votes)

    def __iter__(self):
        return iter(self.votes)

    def classes(self) -> set[str]:
        return {v.class_id for v in self.votes}

    def to_dict(self) -> dict[str, Any]:
        return {"layer": self.layer.value, "votes": [v.to_dict() for v in self.votes]}


@dataclass(frozen=True)
class Decision:
    """Outcome of the decision hierarchy for one study.

    ``deciding_layer`` is the 1-based position ("L1".."L5") of the layer that
    produced the prediction, or None when no layer decided.
    """

    prediction: Optional[str]
    deciding_layer: Optional[str]
    vote_trace: tuple[tuple[str, VoteSet], ...] = ()

    def __post_init__(self) -> None:
        if (self.prediction is None) != (self.deciding_layer is None):
            raise ValueError("prediction must be absent exactly when deciding_layer is None")
        object.__setattr__(self, "vote_trace", tuple(self.vote_trace))

    @property
    def deciding_step(self) -> Optional[LayerKind]:
        if self.deciding_layer is None:
            return None
        return self.vote_trace[-1][1].layer

    def to_dict(self, study_uid: str) -> dict[str, Any]:
        step = self.deciding_step
        return {
            "study_uid": study_uid,
            "prediction": self.prediction,
            "deciding_layer": self.deciding_layer,
            "deciding_step": step.value if step is not None else None,
            "trace": [{"position": pos, **vs.to_dict()} for pos, vs in self.vote_trace],
        }


def pet_counterpart(class_id: str, db: "MappingDatabase") -> str:
    """Return the PET variant of a CT/MRI class when the database has one."""
    cls = db.get_class(class_id)
    if cls.is_pet_variant or cls.modality not in (Modality.CT, Modality.MR):
        return class_id
    candidate = "PET_" + class_id
    if candidate in db.class_ids:
        return candidate
    return class_id
