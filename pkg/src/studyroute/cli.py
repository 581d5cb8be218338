"""Command-line entry point: classify, calibrate, simulate, validate-db."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from studyroute import calibration, mc_sim
from studyroute.evaluation import aggregate, grade, load_minor_errors, read_ground_truth
from studyroute.imaging import ClassifierBackend, load_backend
from studyroute.ingest import ingest_directory
from studyroute.mapping_db import (
    ConfigError,
    MappingDatabase,
    MappingDatabaseError,
    keyword_containment_warnings,
    load_config,
    load_mapping_db,
    validate_config,
)
from studyroute.model import Decision, Modality, RegistryError, StudyBundle
from studyroute.orchestrator import classify_study

log = logging.getLogger("studyroute")

EXIT_OK = 0
EXIT_FAILURE = 1


def atomic_write_text(path: Path, text: str) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        atomic_write_text(Path(out), text)
    else:
        sys.stdout.write(text)


def _pairs(items: Sequence[str], flag: str) -> dict[Modality, str]:
    out = {}
    for item in items:
        mod, sep, value = item.partition("=")
        if not sep or not value:
            raise ValueError(f"{flag} expects MODALITY=VALUE, got {item!r}")
        out[Modality.parse(mod)] = value
    return out


# -- classify ------------------------------------------------------------

_worker_state: dict = {}


def _init_worker(db: MappingDatabase, config, backends, networks: bool) -> None:
    _worker_state.update(db=db, config=config, backends=backends, networks=networks)


def _classify_in_worker(study: StudyBundle) -> Decision:
    s = _worker_state
    return classify_study(study, s["db"], s["config"], s["backends"], networks_enabled=s["networks"])


def _classify_all(bundles, db, config, backends, networks: bool, workers: int) -> list[Decision]:
    # map() keeps input order, so output is identical for any worker count
    if workers > 1 and len(bundles) > 1:
        initargs = (db, config, backends, networks)
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=initargs) as pool:
            return list(pool.map(_classify_in_worker, bundles, chunksize=max(1, len(bundles) // (4 * workers))))
    return [classify_study(b, db, config, backends, networks_enabled=networks) for b in bundles]


def _load_backends(args) -> dict[Modality, ClassifierBackend]:
    specs = _pairs(args.backend or [], "--backend")
    temps = {m: float(t) for m, t in _pairs(args.temperature or [], "--temperature").items()}
    backends = {}
    for mod, spec in sorted(specs.items(), key=lambda kv: kv[0].value):
        backend = load_backend(spec)
        if backend.modality is not mod:
            raise ValueError(f"--backend {mod.value}={spec}: backend reports modality {backend.modality.value}")
        if mod in temps:
            backend.calibration = calibration.CalibrationModel(temps[mod], len(backend.class_list))
        backends[mod] = backend
    unknown = set(temps) - set(backends)
    if unknown:
        raise ValueError(f"--temperature given for modality without a backend: {', '.join(sorted(m.value for m in unknown))}")
    return backends


def cmd_classify(args) -> int:
    try:
        db = load_mapping_db(args.db)
        config = load_config(args.config, db=db)
        overrides = {}
        if args.network_layer_position is not None:
            overrides["network_layer_position"] = args.network_layer_position
        if args.merged_votes:
            overrides["merged_votes"] = True
        if args.minimal_vote_rules:
            overrides["minimal_vote_rules"] = True
        config = config.replace(**overrides)
        backends = _load_backends(args)
        truth = read_ground_truth(args.truth) if args.truth else None
        minor = load_minor_errors(args.minor_errors, known_classes=db.class_ids) if truth is not None else None
    except (OSError, MappingDatabaseError, ConfigError, RegistryError, ValueError, ImportError, AttributeError, TypeError) as exc:
        log.error("%s", exc)
        return EXIT_FAILURE

    try:
        bundles, report = ingest_directory(args.input_dir, config.metadata_key_list, workers=args.workers)
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_FAILURE
    for w in report.warnings:
        log.warning("%s", w)
    for uid, reason in report.series_skipped:
        log.warning("series %s: %s", uid, reason)

    networks = bool(backends) and not args.no_network
    try:
        decisions = _classify_all(bundles, db, config, backends, networks, args.workers)
    except (LookupError, ValueError) as exc:
        log.error("classification failed: %s", exc)
        return EXIT_FAILURE

    lines = [json.dumps(d.to_dict(b.study_uid), sort_keys=True) for b, d in zip(bundles, decisions)]
    eval_text = None
    if truth is not None:
        missing = [b.study_uid for b in bundles if b.study_uid not in truth]
        if missing:
            log.error("no ground truth for %d studies (first: %s)", len(missing), missing[0])
            return EXIT_FAILURE
        graded = [(d, grade(d, truth[b.study_uid], minor)) for b, d in zip(bundles, decisions)]
        ev = aggregate(graded)
        eval_text = json.dumps(ev.to_dict(), sort_keys=True, indent=2) + "\n"
        print(ev.format_text())

    _emit("".join(line + "\n" for line in lines), args.out)
    if eval_text is not None:
        report_path = args.report or (str(Path(args.out).with_suffix(".report.json")) if args.out else None)
        if report_path:
            atomic_write_text(Path(report_path), eval_text)
    log.info("%d studies, %d series classified", report.studies_found, report.series_found)
    return EXIT_OK


# -- calibrate -----------------------------------------------------------


def cmd_calibrate(args) -> int:
    try:
        records = calibration.read_logits_csv(args.logits)
    except (OSError, calibration.CalibrationError) as exc:
        log.error("%s", exc)
        return EXIT_FAILURE
    low, high = args.search
    model = calibration.fit_temperature(records, M=args.bins, search=(low, high))
    before = calibration.compute_ece(records, 1.0, args.bins)
    after = calibration.compute_ece(records, model.temperature, args.bins)
    rows = [
        f"temperature,{model.temperature:.6f}",
        f"ece_before,{before:.6f}",
        f"ece_after,{after:.6f}",
        "stage,bin,count,mean_confidence,accuracy",
    ]
    for stage, t in (("before", 1.0), ("after", model.temperature)):
        for b in calibration.reliability_histogram(records, t, args.bins):
            rows.append(f"{stage},{b.bin_index},{b.count},{b.mean_confidence:.6f},{b.accuracy:.6f}")
    _emit("\n".join(rows) + "\n", args.out)
    return EXIT_OK


# -- simulate ------------------------------------------------------------


def parse_alphas(spec: str) -> list[float]:
    """``a:b:step`` (inclusive) or a comma list."""
    try:
        if ":" in spec:
            a, b, step = (float(p) for p in spec.split(":"))
            if step <= 0 or b < a:
                raise ValueError
            n = int(round((b - a) / step)) + 1
            values = [round(a + i * step, 10) for i in range(n)]
        else:
            values = [float(p) for p in spec.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid alpha grid {spec!r}; use start:stop:step or a comma list") from None
    if not values or any(not 0.0 < v <= 1.0 for v in values):
        raise argparse.ArgumentTypeError(f"alphas must lie in (0, 1]: {spec!r}")
    return values


def parse_series(spec: str) -> list[int]:
    try:
        values = [int(p) for p in spec.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid series list {spec!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"series counts must be positive integers: {spec!r}")
    return values


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _search_range(text: str) -> tuple[float, float]:
    try:
        low, high = (float(p) for p in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected low:high, got {text!r}") from None
    if not 0 < low < high:
        raise argparse.ArgumentTypeError(f"need 0 < low < high, got {text!r}")
    return low, high


def cmd_simulate(args) -> int:
    modes = (False, True) if args.both else (args.correlated,)
    params = mc_sim.McParams(n_studies=args.n, seed=args.seed)
    points = mc_sim.run_experiment(args.alphas, args.series, params, correlated_modes=modes, workers=args.workers)
    _emit(mc_sim.format_curve(points, seed=args.seed), args.out)
    return EXIT_OK


# -- validate-db ---------------------------------------------------------


def cmd_validate_db(args) -> int:
    checks: list[tuple[str, bool, str]] = []
    db = config = None
    try:
        db = load_mapping_db(args.db)
        checks.append(("mapping database", True, f"{len(db)} classes"))
    except (OSError, MappingDatabaseError) as exc:
        checks.append(("mapping database", False, str(exc)))
    try:
        config = load_config(args.config)
        checks.append(("engine config", True, f"{len(config.composition_rules)} composition rules"))
    except (OSError, ConfigError) as exc:
        checks.append(("engine config", False, str(exc)))
    if db is not None and config is not None:
        problems = validate_config(config, db)
        checks.append(("composition targets exist", not problems, "; ".join(problems) or "ok"))
    if db is not None:
        try:
            table = load_minor_errors(args.minor_errors)
            unknown = table.unknown_classes(db.class_ids)
            detail = f"unknown classes: {', '.join(unknown)}" if unknown else f"{len(table.pairs)} pairs"
            checks.append(("minor-error classes exist", not unknown, detail))
        except (OSError, ValueError) as exc:
            checks.append(("minor-error classes exist", False, str(exc)))
        overlaps = keyword_containment_warnings(db)
        checks.append(("keywords not contained in other classes", not overlaps, "; ".join(overlaps) or "ok"))

    width = max(len(name) for name, _, _ in checks)
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<{width}}  {detail}")
    return EXIT_OK if all(ok for _, ok, _ in checks) else EXIT_FAILURE


# -- parser --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="studyroute", description="Route external imaging studies to canonical study classes.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("classify", help="ingest a DICOM directory and predict one class per study")
    c.add_argument("input_dir")
    c.add_argument("--db", help="mapping database TSV (default: shipped table)")
    c.add_argument("--config", help="engine config file (default: shipped config)")
    c.add_argument("--truth", help="ground-truth CSV; enables the evaluation report")
    c.add_argument("--minor-errors", help="minor-error pair table (default: shipped table)")
    c.add_argument("--backend", action="append", metavar="MOD=SPEC", help="oracle CSV or module:factory per modality")
    c.add_argument("--temperature", action="append", metavar="MOD=T", help="calibration temperature per backend")
    c.add_argument("--no-network", action="store_true", help="drop the network layer")
    c.add_argument("--network-layer-position", type=int, choices=range(1, 6))
    c.add_argument("--merged-votes", action="store_true")
    c.add_argument("--minimal-vote-rules", action="store_true")
    c.add_argument("--out", help="predictions JSONL (default: stdout)")
    c.add_argument("--report", help="evaluation report JSON (default: next to --out)")
    c.add_argument("--workers", type=_positive_int, default=1)
    c.set_defaults(func=cmd_classify)

    k = sub.add_parser("calibrate", help="fit a temperature on held-out logits")
    k.add_argument("logits")
    k.add_argument("--bins", type=_positive_int, default=10)
    k.add_argument("--search", type=_search_range, default=(0.05, 20.0), metavar="LOW:HIGH")
    k.add_argument("--out")
    k.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("simulate", help="Monte Carlo accuracy curve for weighted voting")
    s.add_argument("--alphas", type=parse_alphas, default=parse_alphas("0.5:0.95:0.05"))
    s.add_argument("--series", "--series-per-study", dest="series", type=parse_series, default=[1, 2, 4, 8])
    s.add_argument("--n", "--n-studies", dest="n", type=_positive_int, default=100_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--correlated", action="store_true")
    s.add_argument("--both", action="store_true", help="run uncorrelated and correlated modes")
    s.add_argument("--out")
    s.add_argument("--workers", type=_positive_int, default=1)
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("validate-db", help="check the mapping database, config and minor-error table")
    v.add_argument("--db")
    v.add_argument("--config")
    v.add_argument("--minor-errors")
    v.set_defaults(func=cmd_validate_db)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
