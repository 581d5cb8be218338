"""Vote rules (disallow / compose) and weighted plurality tallying."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from studyroute.mapping_db import EngineConfig, MappingDatabase
from studyroute.model import LayerKind, Modality, StudyBundle, Vote, VoteSet
from studyroute.text_match import normalize_text

TIE_RTOL = 1e-9
MAX_COMPOSITION_PASSES = 10


@dataclass(frozen=True)
class TallyOutcome:
    kind: str  # "winner" | "tie" | "empty"
    winner: Optional[str] = None
    total_weight: float = 0.0
    tied: tuple[str, ...] = ()
    totals: tuple[tuple[str, float], ...] = ()

    @classmethod
    def empty(cls) -> "TallyOutcome":
        return cls("empty")

    @property
    def is_winner(self) -> bool:
        return self.kind == "winner"


def _is_tied(t1: float, t2: float) -> bool:
    return abs(t1 - t2) <= TIE_RTOL * max(t1, t2)


def class_totals(votes: Iterable[Vote]) -> dict[str, float]:
    """Per-class weight sums in class_id order.

    ``math.fsum`` is exactly rounded, so the totals do not depend on vote order.
    """
    grouped: dict[str, list[float]] = defaultdict(list)
    for v in votes:
        grouped[v.class_id].append(v.weight)
    return {cid: math.fsum(grouped[cid]) for cid in sorted(grouped)}


def tally(votes: VoteSet | Iterable[Vote]) -> TallyOutcome:
    totals = class_totals(votes)
    if not totals:
        return TallyOutcome.empty()
    top = max(totals.values())
    leaders = tuple(cid for cid, t in totals.items() if _is_tied(t, top))
    ordered = tuple(totals.items())
    if len(leaders) == 1:
        return TallyOutcome("winner", winner=leaders[0], total_weight=totals[leaders[0]], totals=ordered)
    return TallyOutcome("tie", tied=leaders, total_weight=top, totals=ordered)


def break_tie(votes: Iterable[Vote], tied: Iterable[str]) -> str:
    """Terminal tie-break: the tied class holding the largest single vote, then lexicographic class_id."""
    tied = set(tied)
    best_single = {cid: 0.0 for cid in tied}
    for v in votes:
        if v.class_id in tied and v.weight > best_single[v.class_id]:
            best_single[v.class_id] = v.weight
    return min(tied, key=lambda cid: (-best_single[cid], cid))


def merge_vote_sets(a: VoteSet, b: VoteSet) -> VoteSet:
    return VoteSet(a.votes + b.votes, LayerKind.MERGED)


def _series_allowed(series_modality: Modality, study_modality: Modality) -> bool:
    if series_modality == study_modality:
        return True
    # PET studies carry their anatomy in the accompanying CT/MR series
    return study_modality is Modality.PT and series_modality in (Modality.CT, Modality.MR)


def apply_vote_rules(
    votes: VoteSet, study: StudyBundle, config: EngineConfig, db: Optional[MappingDatabase] = None
) -> VoteSet:
    """Drop disallowed votes, then rewrite votes matched by composition rules.

    Disallow: series modality differs from the study modality (when enabled),
    or the series description contains a blacklisted term. Composition is
    skipped entirely under ``minimal_vote_rules``.
    """
    blacklist = [t for t in (normalize_text(b) for b in config.blacklist_terms) if t]
    kept = []
    for v in votes.votes:
        if v.series_uid is not None:
            series = study.series_by_uid(v.series_uid)
            if series is not None:
                if config.modality_mismatch_disallow and not _series_allowed(series.modality, study.study_modality):
                    continue
                desc = normalize_text(series.series_description)
                if desc and any(term in desc for term in blacklist):
                    continue
        kept.append(v)
    if config.minimal_vote_rules or not config.composition_rules:
        return VoteSet(kept, votes.layer)
    return VoteSet(compose_votes(kept, config), votes.layer)


def compose_votes(votes: list[Vote], config: EngineConfig) -> list[Vote]:
    """Apply composition rules as a bounded fixed point.

    Within one pass every rule is tested against the class set present at the
    start of the pass, so rules never chain inside a pass. Each rule fires at
    most once over all passes.
    """
    fired: set[int] = set()
    current = list(votes)
    for _ in range(MAX_COMPOSITION_PASSES):
        present = {v.class_id for v in current}
        rewrite: dict[str, str] = {}
        for idx, rule in enumerate(config.composition_rules):
            if idx in fired or not rule.required <= present:
                continue
            fired.add(idx)
            for cid in rule.required:
                rewrite.setdefault(cid, rule.replacement)
        if not rewrite:
            break
        current = [
            Vote(rewrite[v.class_id], v.weight, v.source, v.series_uid) if v.class_id in rewrite else v
            for v in current
        ]
    return current


def tally_batch(labels: np.ndarray, weights: np.ndarray, n_labels: int) -> np.ndarray:
    """Vectorized counterpart of :func:`tally` plus :func:`break_tie` for integer labels.

    ``labels`` and ``weights`` have shape (studies, votes). Returns the winning
    label per study; ties use the same tolerance and the same terminal
    tie-break (largest single vote, then smallest label). Label order plays the
    role of class_id order.
    """
    labels = np.asarray(labels)
    weights = np.asarray(weights, dtype=np.float64)
    n, m = labels.shape
    totals = np.zeros(n * n_labels)
    best_single = np.zeros(n * n_labels)
    base = np.arange(n) * n_labels
    for j in range(m):
        # each row receives exactly one vote per column, so flat indices are unique
        idx = base + labels[:, j]
        totals[idx] += weights[:, j]
        best_single[idx] = np.maximum(best_single[idx], weights[:, j])
    totals = totals.reshape(n, n_labels)
    best_single = best_single.reshape(n, n_labels)
    top = totals.max(axis=1, keepdims=True)
    present = totals > 0
    leaders = present & (np.abs(totals - top) <= TIE_RTOL * top)
    single = np.where(leaders, best_single, -1.0)
    best = single.max(axis=1, keepdims=True)
    # argmax returns the first (smallest) label among equal maxima
    return np.argmax(leaders & (single == best), axis=1)
