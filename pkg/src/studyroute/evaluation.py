"""Grading predictions against ground truth and summarizing them."""

from __future__ import annotations

import csv
import enum
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

from studyroute.mapping_db import default_minor_errors_path
from studyroute.model import NETWORK_LAYERS, Decision, RegistryError


class Grade(str, enum.Enum):
    CORRECT = "Correct"
    MINOR = "Minor"
    MAJOR = "Major"
    NO_PREDICTION = "NoPrediction"


@dataclass(frozen=True)
class GroundTruth:
    study_uid: str
    labels: frozenset[str]

    def __post_init__(self) -> None:
        object.__setattr__(self, "labels", frozenset(self.labels))
        if not self.labels:
            raise ValueError(f"{self.study_uid}: ground truth needs at least one label")


@dataclass(frozen=True)
class MinorErrorTable:
    """Directed (true class -> tolerated misclassification) pairs."""

    pairs: frozenset[tuple[str, str]]
    known_classes: Optional[frozenset[str]] = None

    def is_minor(self, truth: str, predicted: str) -> bool:
        return (truth, predicted) in self.pairs

    def check_known(self, *class_ids: str) -> None:
        if self.known_classes is None:
            return
        for cid in class_ids:
            if cid not in self.known_classes:
                raise RegistryError(f"unknown class_id {cid!r}")

    def unknown_classes(self, known: Iterable[str]) -> list[str]:
        known = set(known)
        return sorted({c for pair in self.pairs for c in pair} - known)


def load_minor_errors(path: Union[str, Path, None] = None, known_classes: Optional[Iterable[str]] = None) -> MinorErrorTable:
    path = Path(path) if path is not None else default_minor_errors_path()
    pairs = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        cells = [c.strip() for c in line.split("\t")]
        if len(cells) != 2 or not all(cells):
            raise ValueError(f"{path}:{lineno}: expected 'true_class<TAB>misclassification'")
        pairs.add((cells[0], cells[1]))
    return MinorErrorTable(frozenset(pairs), frozenset(known_classes) if known_classes is not None else None)


def grade(decision: Decision, truth: GroundTruth, table: MinorErrorTable) -> Grade:
    table.check_known(*truth.labels)
    if decision.prediction is None:
        return Grade.NO_PREDICTION
    pred = decision.prediction
    table.check_known(pred)
    if pred in truth.labels:
        return Grade.CORRECT
    if any(table.is_minor(t, pred) for t in truth.labels):
        return Grade.MINOR
    return Grade.MAJOR


@dataclass(frozen=True)
class EvalReport:
    total: int
    predicted: int
    correct: int
    minor: int
    major: int
    predictive_power: float
    accuracy: float
    minor_rate: float
    major_rate: float
    network_contribution: float
    accuracy_of_predicted: float
    layer_histogram: tuple[tuple[str, int], ...] = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_histogram"] = dict(self.layer_histogram)
        return d

    def format_text(self) -> str:
        lines = [
            f"total                 {self.total}",
            f"predicted             {self.predicted}",
            f"correct               {self.correct}",
            f"minor                 {self.minor}",
            f"major                 {self.major}",
            f"predictive_power      {self.predictive_power:.4f}",
            f"accuracy              {self.accuracy:.4f}",
            f"accuracy_of_predicted {self.accuracy_of_predicted:.4f}",
            f"minor_rate            {self.minor_rate:.4f}",
            f"major_rate            {self.major_rate:.4f}",
            f"network_contribution  {self.network_contribution:.4f}",
            "decisions per layer:",
        ]
        lines += [f"  {layer:<22}{n}" for layer, n in self.layer_histogram]
        return "\n".join(lines)


def _ratio(a: int, b: int) -> float:
    return a / b if b else 0.0


def aggregate(grades: Sequence[tuple[Decision, Grade]]) -> EvalReport:
    """Counts and rates; every rate except ``accuracy_of_predicted`` is over all studies."""
    counts = Counter(g for _, g in grades)
    total = len(grades)
    correct, minor, major = counts[Grade.CORRECT], counts[Grade.MINOR], counts[Grade.MAJOR]
    predicted = correct + minor + major
    by_network = sum(1 for d, g in grades if g is not Grade.NO_PREDICTION and d.deciding_step in NETWORK_LAYERS)
    histogram = Counter(
        f"{d.deciding_layer}:{d.deciding_step.value}" if d.deciding_layer else "none" for d, _ in grades
    )
    return EvalReport(
        total=total,
        predicted=predicted,
        correct=correct,
        minor=minor,
        major=major,
        predictive_power=_ratio(predicted, total),
        accuracy=_ratio(correct, total),
        minor_rate=_ratio(minor, total),
        major_rate=_ratio(major, total),
        network_contribution=_ratio(by_network, predicted),
        accuracy_of_predicted=_ratio(correct, predicted),
        layer_histogram=tuple(sorted(histogram.items())),
    )


def read_ground_truth(path: Union[str, Path]) -> dict[str, GroundTruth]:
    """Read ``study_uid,label1|label2|...`` rows."""
    path = Path(path)
    out = {}
    with path.open(encoding="utf-8", newline="") as fh:
        for rowno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            if rowno == 1 and row[0].strip().lower() == "study_uid":
                continue
            if len(row) != 2:
                raise ValueError(f"{path}:{rowno}: expected 'study_uid,labels'")
            labels = frozenset(l.strip() for l in row[1].split("|") if l.strip())
            try:
                out[row[0].strip()] = GroundTruth(row[0].strip(), labels)
            except ValueError as exc:
                raise ValueError(f"{path}:{rowno}: {exc}") from None
    return out
