import pytest

from studyroute.mapping_db import (
    ConfigError,
    EngineConfig,
    MappingDatabaseError,
    default_mapping_path,
    keyword_containment_warnings,
    load_config,
    load_mapping_db,
    lookup_procedure_code,
    parse_config,
    parse_mapping_db,
    validate_config,
)
from studyroute.model import Modality
from studyroute.text_match import normalize_text


def test_shipped_table_has_76_classes(db):
    assert len(db) == 76
    assert len(db.class_ids) == 76


def test_shipped_table_covers_every_modality_family(db):
    mods = {c.modality for c in db.classes}
    assert mods == {Modality.CT, Modality.CR, Modality.MR, Modality.US, Modality.XA, Modality.MG, Modality.PT}


def test_shipped_table_has_no_keyword_containment(db):
    assert keyword_containment_warnings(db) == []


def test_load_is_deterministic():
    assert load_mapping_db() == load_mapping_db()
    text = default_mapping_path().read_text(encoding="utf-8")
    assert parse_mapping_db(text) == parse_mapping_db(text)


def test_empty_file():
    with pytest.raises(MappingDatabaseError, match="no classes defined"):
        parse_mapping_db("")
    with pytest.raises(MappingDatabaseError, match="no classes defined"):
        parse_mapping_db("# only a comment\n\n")


def test_keyword_too_short():
    with pytest.raises(MappingDatabaseError, match="keyword too short"):
        parse_mapping_db("CT_X\tCT X\tCT\t\tCT\n")


def test_short_keyword_length_bounds():
    with pytest.raises(MappingDatabaseError, match="short keyword"):
        parse_mapping_db("A\tA\tCR\t\t\tLEG\n")
    with pytest.raises(MappingDatabaseError, match="short keyword"):
        parse_mapping_db("A\tA\tCR\t\t\tLEGGING\n")


def test_validation_collects_every_problem():
    text = (
        "A\tClass A\tCT\tP1\tTHORAX CT\n"
        "A\tClass A again\tCT\t\tABDOMEN CT\n"
        "B\tClass B\tCT\tP1\tTHORAX CT\n"
        "C\tClass C\tCT\t\tCT\n"
        "broken row\n"
    )
    with pytest.raises(MappingDatabaseError) as err:
        parse_mapping_db(text, source="bad.tsv")
    diags = err.value.diagnostics
    assert len(diags) == 5
    assert any("duplicate class_id A" in d for d in diags)
    assert any("procedure code 'P1' mapped to both A and B" in d for d in diags)
    assert any("'THORAX CT' mapped to both A and B" in d for d in diags)
    assert any("keyword too short" in d for d in diags)
    assert any("bad.tsv:5: unparseable row" in d for d in diags)


def test_pt_rows_are_pet_variants():
    db = parse_mapping_db("CT_SKULL\tCT Skull\tCT\t\tSKULL CT\nPET_CT_SKULL\tPET CT Skull\tPT\t\tPET SKULL\n")
    assert db.get_class("PET_CT_SKULL").is_pet_variant
    assert not db.get_class("CT_SKULL").is_pet_variant


def test_lookup_procedure_code(db):
    code, cid = next(iter(db.procedure_codes.items()))
    assert lookup_procedure_code(code, db) == cid
    assert lookup_procedure_code("", db) is None
    assert lookup_procedure_code(None, db) is None
    assert lookup_procedure_code("NO-SUCH-CODE", db) is None


def test_lookup_procedure_code_normalizes_both_sides():
    db = parse_mapping_db("CT_SKULL\tCT Skull\tCT\tRad-CT.001\tSKULL CT\n")
    for variant in ("rad ct 001", "RAD_CT_001", " rad-ct-001 ", "Rad/Ct/001"):
        assert normalize_text(variant) == normalize_text("Rad-CT.001")
        assert lookup_procedure_code(variant, db) == "CT_SKULL"


def test_exact_targets(db):
    assert db.exact_target(normalize_text("CT Skull")) == "CT_SKULL"
    assert db.exact_target("") is None


def test_config_defaults_and_single_override():
    cfg = parse_config("network_layer_position = 4\n")
    assert cfg == EngineConfig(network_layer_position=4)


def test_config_range_error():
    with pytest.raises(ConfigError, match="network_layer_position"):
        parse_config("network_layer_position = 7\n")
    with pytest.raises(ConfigError, match="temperature_search"):
        parse_config("temperature_search = 2, 1\n")


def test_config_merged_votes():
    assert parse_config("merged_votes = true").merged_votes is True


def test_config_unknown_key_lists_valid_keys():
    with pytest.raises(ConfigError, match="unknown key 'netwrok_layer_position'.*network_layer_position"):
        parse_config("netwrok_layer_position = 4\n", source="x.conf")


def test_config_bad_value_has_line_number():
    with pytest.raises(ConfigError, match="x.conf:2"):
        parse_config("merged_votes = true\nece_bins = many\n", source="x.conf")


def test_config_compose_and_blacklist():
    cfg = parse_config("compose = A + B -> AB\nblacklist = Screenshot, dose report\n")
    assert cfg.composition_rules[0].required == frozenset({"A", "B"})
    assert cfg.composition_rules[0].replacement == "AB"
    assert cfg.blacklist_terms == ("Screenshot", "dose report")
    with pytest.raises(ConfigError):
        parse_config("compose = A -> B\n")


def test_shipped_config_validates(db, config):
    assert validate_config(config, db) == []
    assert config.network_layer_position == 5
    assert "screenshot" in config.blacklist_terms


def test_rule_with_unknown_class_is_rejected(db, tmp_path):
    p = tmp_path / "c.conf"
    p.write_text("compose = CT_THORAX + CT_NOPE -> CT_THORAX_ABDOMEN\n")
    with pytest.raises(ConfigError, match="CT_NOPE"):
        load_config(p, db=db)
