"""Loading and validation of the mapping database and the engine configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator, Optional, Union

from studyroute.model import Modality, RegistryError, StudyClass
from studyroute.text_match import MIN_PARTIAL_LENGTH, MIN_SHORT_LENGTH, normalize_text

PathLike = Union[str, Path]

MAX_SHORT_LENGTH = 5
DEFAULT_METADATA_KEYS = (
    "SeriesDescription",
    "ProtocolName",
    "BodyPartExamined",
    "RequestedProcedureDescription",
)
_COLUMNS = ("class_id", "display_name", "modality", "procedure_codes", "keywords", "short_keywords")


class MappingDatabaseError(ValueError):
    """Raised when the mapping table fails validation; ``diagnostics`` lists every problem found."""

    def __init__(self, diagnostics: list[str]):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(self.diagnostics))


class ConfigError(ValueError):
    pass


def default_mapping_path() -> Path:
    return Path(str(resources.files("studyroute.data").joinpath("default_mapping.tsv")))


def default_config_path() -> Path:
    return Path(str(resources.files("studyroute.data").joinpath("default.conf")))


def default_minor_errors_path() -> Path:
    return Path(str(resources.files("studyroute.data").joinpath("minor_errors.tsv")))


@dataclass(frozen=True)
class MappingDatabase:
    classes: tuple[StudyClass, ...]
    procedure_codes: dict[str, str]
    keywords: dict[str, tuple[str, ...]]
    short_keywords: dict[str, tuple[str, ...]]
    _by_id: dict[str, StudyClass] = field(init=False, repr=False, compare=False)
    _keyword_index: tuple[tuple[str, str, bool], ...] = field(init=False, repr=False, compare=False)
    _exact_targets: dict[str, str] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_by_id", {c.class_id: c for c in self.classes})
        index = [(cid, kw, False) for cid, kws in self.keywords.items() for kw in kws]
        index += [(cid, kw, True) for cid, kws in self.short_keywords.items() for kw in kws]
        object.__setattr__(self, "_keyword_index", tuple(index))
        targets: dict[str, str] = {}
        for c in self.classes:
            targets.setdefault(normalize_text(c.display_name), c.class_id)
            for kw in self.keywords.get(c.class_id, ()) + self.short_keywords.get(c.class_id, ()):
                targets.setdefault(kw, c.class_id)
        object.__setattr__(self, "_exact_targets", targets)

    @property
    def class_ids(self) -> frozenset[str]:
        return frozenset(self._by_id)

    def get_class(self, class_id: str) -> StudyClass:
        try:
            return self._by_id[class_id]
        except KeyError:
            raise RegistryError(f"unknown class_id {class_id!r}") from None

    def __contains__(self, class_id: object) -> bool:
        return class_id in self._by_id

    def __len__(self) -> int:
        return len(self.classes)

    def iter_keywords(self) -> Iterator[tuple[str, str, bool]]:
        """Yield ``(class_id, normalized_keyword, is_short)`` for every registered keyword."""
        return iter(self._keyword_index)

    def exact_target(self, normalized: str) -> Optional[str]:
        """Class whose display name or keyword equals ``normalized`` exactly."""
        if not normalized:
            return None
        return self._exact_targets.get(normalized)

    def classes_for_modality(self, modality: Modality) -> list[str]:
        return [c.class_id for c in self.classes if c.modality == modality]


def _split(cell: str) -> list[str]:
    return [part.strip() for part in cell.split("|") if part.strip()]


def parse_mapping_db(text: str, source: str = "<string>") -> MappingDatabase:
    """Parse and validate a mapping table; collects every error before raising."""
    errors: list[str] = []
    classes: list[StudyClass] = []
    procedure_codes: dict[str, str] = {}
    keywords: dict[str, list[str]] = {}
    short_keywords: dict[str, list[str]] = {}
    keyword_owner: dict[tuple[str, bool], str] = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cells = line.split("\t")
        if len(cells) > len(_COLUMNS) or len(cells) < 3:
            errors.append(f"{source}:{lineno}: unparseable row (expected up to {len(_COLUMNS)} tab-separated columns, got {len(cells)})")
            continue
        cells += [""] * (len(_COLUMNS) - len(cells))
        class_id, display_name, modality_s, codes_s, kw_s, short_s = (c.strip() for c in cells)
        if not class_id or not display_name:
            errors.append(f"{source}:{lineno}: unparseable row (empty class_id or display_name)")
            continue
        if class_id in keywords:
            errors.append(f"{source}:{lineno}: duplicate class_id {class_id}")
            continue
        modality = Modality.parse(modality_s)
        if modality is Modality.OT and modality_s.upper() != "OT":
            errors.append(f"{source}:{lineno}: unknown modality {modality_s!r} for {class_id}")
        classes.append(StudyClass(class_id, display_name, modality, is_pet_variant=modality is Modality.PT))
        keywords[class_id] = []
        short_keywords[class_id] = []

        for code in _split(codes_s):
            norm = normalize_text(code)
            if not norm:
                errors.append(f"{source}:{lineno}: empty procedure code for {class_id}")
            elif norm in procedure_codes and procedure_codes[norm] != class_id:
                errors.append(f"{source}:{lineno}: procedure code {code!r} mapped to both {procedure_codes[norm]} and {class_id}")
            else:
                procedure_codes[norm] = class_id

        for is_short, cell, target in ((False, kw_s, keywords), (True, short_s, short_keywords)):
            for kw in _split(cell):
                norm = normalize_text(kw)
                if is_short and not MIN_SHORT_LENGTH <= len(norm) <= MAX_SHORT_LENGTH:
                    errors.append(f"{source}:{lineno}: short keyword {kw!r} has length {len(norm)}, must be {MIN_SHORT_LENGTH}-{MAX_SHORT_LENGTH}")
                    continue
                if not is_short and len(norm) < MIN_PARTIAL_LENGTH:
                    errors.append(f"{source}:{lineno}: keyword too short: {kw!r} (normalized length {len(norm)} < {MIN_PARTIAL_LENGTH})")
                    continue
                owner = keyword_owner.get((norm, is_short))
                if owner is not None and owner != class_id:
                    errors.append(f"{source}:{lineno}: keyword {norm!r} mapped to both {owner} and {class_id}")
                    continue
                keyword_owner[(norm, is_short)] = class_id
                if norm not in target[class_id]:
                    target[class_id].append(norm)

    if not classes and not errors:
        errors.append(f"{source}: no classes defined")
    if errors:
        raise MappingDatabaseError(errors)
    return MappingDatabase(
        classes=tuple(classes),
        procedure_codes=procedure_codes,
        keywords={k: tuple(v) for k, v in keywords.items()},
        short_keywords={k: tuple(v) for k, v in short_keywords.items()},
    )


def load_mapping_db(path: Optional[PathLike] = None) -> MappingDatabase:
    """Load the mapping table at ``path`` (the shipped default when omitted)."""
    path = Path(path) if path is not None else default_mapping_path()
    return parse_mapping_db(path.read_text(encoding="utf-8"), source=str(path))


def lookup_procedure_code(code: Optional[str], db: MappingDatabase) -> Optional[str]:
    norm = normalize_text(code)
    if not norm:
        return None
    return db.procedure_codes.get(norm)


def keyword_containment_warnings(db: MappingDatabase) -> list[str]:
    """Long keywords of one class contained in a keyword of another class.

    Text equal to the contained keyword matches both at the same length, which
    the partial matcher treats as ambiguous.
    """
    longs = [(cid, kw) for cid, kw, short in db.iter_keywords() if not short]
    out = []
    for cid, kw in longs:
        for cid2, kw2 in longs:
            if cid != cid2 and kw in kw2:
                out.append(f"keyword {kw!r} ({cid}) is contained in {kw2!r} ({cid2})")
    return out


@dataclass(frozen=True)
class CompositionRule:
    required: frozenset[str]
    replacement: str

    def __str__(self) -> str:
        return " + ".join(sorted(self.required)) + " -> " + self.replacement


@dataclass(frozen=True)
class EngineConfig:
    metadata_key_list: tuple[str, ...] = DEFAULT_METADATA_KEYS
    blacklist_terms: tuple[str, ...] = ()
    composition_rules: tuple[CompositionRule, ...] = ()
    modality_mismatch_disallow: bool = True
    network_layer_position: int = 5
    merged_votes: bool = False
    minimal_vote_rules: bool = False
    ece_bins: int = 10
    temperature_search: tuple[float, float] = (0.05, 20.0)

    def __post_init__(self) -> None:
        if self.network_layer_position not in (1, 2, 3, 4, 5):
            raise ConfigError(f"network_layer_position must be in 1..5, got {self.network_layer_position}")
        if self.ece_bins < 1:
            raise ConfigError(f"ece_bins must be a positive integer, got {self.ece_bins}")
        low, high = self.temperature_search
        if not 0 < low < high:
            raise ConfigError(f"temperature_search must satisfy 0 < low < high, got {self.temperature_search}")

    def replace(self, **changes) -> "EngineConfig":
        return dataclasses.replace(self, **changes)


_CONFIG_KEYS = {f.name for f in dataclasses.fields(EngineConfig)} | {"blacklist", "compose"}


def _parse_bool(key: str, value: str) -> bool:
    v = value.strip().lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def _parse_rule(value: str) -> CompositionRule:
    if "->" not in value:
        raise ConfigError(f"compose: expected 'A + B -> C', got {value!r}")
    lhs, rhs = value.split("->", 1)
    required = frozenset(p.strip() for p in lhs.split("+") if p.strip())
    replacement = rhs.strip()
    if len(required) < 2 or not replacement:
        raise ConfigError(f"compose: a rule needs at least two required classes and one replacement, got {value!r}")
    return CompositionRule(required, replacement)


def parse_config(text: str, source: str = "<string>") -> EngineConfig:
    values: dict = {}
    rules: list[CompositionRule] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}; valid keys: {', '.join(sorted(_CONFIG_KEYS))}")
        try:
            if key == "compose":
                rules.append(_parse_rule(value))
            elif key == "composition_rules":
                rules.extend(_parse_rule(v) for v in value.split(";") if v.strip())
            elif key in ("blacklist", "blacklist_terms"):
                values["blacklist_terms"] = tuple(t.strip() for t in value.split(",") if t.strip())
            elif key == "metadata_key_list":
                values[key] = tuple(t.strip() for t in value.split(",") if t.strip())
            elif key in ("modality_mismatch_disallow", "merged_votes", "minimal_vote_rules"):
                values[key] = _parse_bool(key, value)
            elif key in ("network_layer_position", "ece_bins"):
                values[key] = int(value)
            elif key == "temperature_search":
                parts = [float(p) for p in value.replace(":", ",").split(",")]
                if len(parts) != 2:
                    raise ConfigError("temperature_search: expected 'low, high'")
                values[key] = (parts[0], parts[1])
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise ConfigError(f"{source}:{lineno}: {exc}") from None
            raise ConfigError(f"{source}:{lineno}: {key}: invalid value {value!r}") from None
    if rules:
        values["composition_rules"] = tuple(rules)
    try:
        return EngineConfig(**values)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path: Optional[PathLike] = None, db: Optional[MappingDatabase] = None) -> EngineConfig:
    """Load a key=value config file; unset keys keep their defaults.

    When ``db`` is given, class references in composition rules are checked too.
    """
    path = Path(path) if path is not None else default_config_path()
    config = parse_config(path.read_text(encoding="utf-8"), source=str(path))
    if db is not None:
        problems = validate_config(config, db)
        if problems:
            raise ConfigError("; ".join(problems))
    return config


def validate_config(config: EngineConfig, db: MappingDatabase) -> list[str]:
    problems = []
    for rule in config.composition_rules:
        for cid in sorted(rule.required) + [rule.replacement]:
            if cid not in db:
                problems.append(f"composition rule '{rule}' references unknown class {cid}")
    return problems
