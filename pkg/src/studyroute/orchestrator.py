"""The layered decision hierarchy: descend until some layer produces a prediction."""

from __future__ import annotations

from typing import Mapping, Optional

from studyroute.imaging import ClassifierBackend, network_vote_set
from studyroute.mapping_db import EngineConfig, MappingDatabase, lookup_procedure_code
from studyroute.model import Decision, LayerKind, Modality, StudyBundle, Vote, VoteSet, VoteSource
from studyroute.text_match import best_keyword_match, normalize_text
from studyroute.votes import apply_vote_rules, break_tie, merge_vote_sets, tally

DEFAULT_PLAN = (
    LayerKind.PROC_CODE,
    LayerKind.STUDY_DESC_EXACT,
    LayerKind.STUDY_DESC_PARTIAL,
    LayerKind.SERIES_META_VOTE,
)

Backends = Mapping[Modality, ClassifierBackend]


def build_layer_plan(config: EngineConfig, networks_enabled: bool = True) -> tuple[LayerKind, ...]:
    """Layer order for a config.

    Without networks the four metadata layers remain. With merged votes the
    metadata vote and network vote collapse into one final layer. Otherwise
    the network layer is inserted before the k-th metadata layer (k = 5
    appends it).
    """
    if not networks_enabled:
        return DEFAULT_PLAN
    if config.merged_votes:
        return DEFAULT_PLAN[:3] + (LayerKind.MERGED_META_NETWORK_VOTE,)
    k = config.network_layer_position
    return DEFAULT_PLAN[: k - 1] + (LayerKind.NETWORK_VOTE,) + DEFAULT_PLAN[k - 1 :]


def _single(layer: LayerKind, class_id: Optional[str], source: VoteSource) -> VoteSet:
    return VoteSet((Vote(class_id, 1.0, source),) if class_id else (), layer)


def series_meta_votes(study: StudyBundle, db: MappingDatabase, config: EngineConfig) -> VoteSet:
    """One weight-1 vote per (series, metadata key) whose value matches a keyword."""
    votes = []
    for series in study.series:
        for key in config.metadata_key_list:
            text = normalize_text(series.meta_value(key))
            hit = best_keyword_match(text, db)
            if hit is not None:
                votes.append(Vote(hit.class_id, 1.0, VoteSource.SERIES_META, series.series_uid))
    return VoteSet(votes, LayerKind.SERIES_META_VOTE)


def _run_layer(
    layer: LayerKind,
    study: StudyBundle,
    db: MappingDatabase,
    config: EngineConfig,
    backends: Backends,
    terminal: bool,
) -> tuple[Optional[str], VoteSet]:
    if layer is LayerKind.PROC_CODE:
        cid = lookup_procedure_code(study.procedure_code, db)
        return cid, _single(layer, cid, VoteSource.PROCEDURE_CODE)
    if layer is LayerKind.STUDY_DESC_EXACT:
        cid = db.exact_target(normalize_text(study.study_description))
        return cid, _single(layer, cid, VoteSource.STUDY_DESC_EXACT)
    if layer is LayerKind.STUDY_DESC_PARTIAL:
        hit = best_keyword_match(normalize_text(study.study_description), db)
        cid = hit.class_id if hit else None
        return cid, _single(layer, cid, VoteSource.STUDY_DESC_PARTIAL)

    if layer is LayerKind.SERIES_META_VOTE:
        raw = series_meta_votes(study, db, config)
    elif layer is LayerKind.NETWORK_VOTE:
        raw = network_vote_set(study, backends, db)
    else:
        raw = merge_vote_sets(series_meta_votes(study, db, config), network_vote_set(study, backends, db))
    voted = apply_vote_rules(raw, study, config, db)
    voted = VoteSet(voted.votes, layer)
    outcome = tally(voted)
    if outcome.is_winner:
        return outcome.winner, voted
    if outcome.kind == "tie" and terminal and layer is not LayerKind.SERIES_META_VOTE:
        return break_tie(voted.votes, outcome.tied), voted
    return None, voted


def classify_study(
    study: StudyBundle,
    db: MappingDatabase,
    config: EngineConfig,
    backends: Optional[Backends] = None,
    networks_enabled: Optional[bool] = None,
) -> Decision:
    """Run the layer plan in order and return the first successful prediction.

    ``networks_enabled`` defaults to whether any backend was supplied.
    """
    backends = backends or {}
    if networks_enabled is None:
        networks_enabled = bool(backends)
    plan = build_layer_plan(config, networks_enabled)
    trace = []
    for pos, layer in enumerate(plan, start=1):
        cid, voteset = _run_layer(layer, study, db, config, backends, terminal=pos == len(plan))
        trace.append((f"L{pos}", voteset))
        if cid is not None:
            return Decision(cid, f"L{pos}", trace)
    return Decision(None, None, trace)
