import random
import string

import pytest
from hypothesis import given
from hypothesis import strategies as st

from studyroute.mapping_db import parse_mapping_db
from studyroute.text_match import (
    MIN_PARTIAL_LENGTH,
    MIN_SHORT_LENGTH,
    best_keyword_match,
    longest_common_substring,
    match_keyword,
    normalize_text,
)

ALPHABET = string.ascii_uppercase + " "


def brute_force_lcs(a: str, b: str) -> tuple[int, str]:
    """Every substring of ``a`` by start then length; first longest wins."""
    best = ""
    for i in range(len(a)):
        for j in range(i + 1, len(a) + 1):
            if j - i > len(best) and a[i:j] in b:
                best = a[i:j]
    return len(best), best


@pytest.mark.parametrize(
    "raw, expected",
    [("ct-Thorax / Abdomen ", "CT THORAX ABDOMEN"), ("", ""), ("MRT  Schädel", "MRT SCHADEL"),
     (None, ""), ("Gefäße", "GEFAE"), ("  __x__ ", "X")],
)
def test_normalize_text(raw, expected):
    assert normalize_text(raw) == expected


@given(st.text())
def test_normalize_idempotent_and_canonical(s):
    n = normalize_text(s)
    assert normalize_text(n) == n
    assert n == n.strip()
    assert "  " not in n
    assert set(n) <= set(string.ascii_uppercase + string.digits + " ")


@pytest.mark.parametrize(
    "a, b, expected",
    [("CT THORAX ABDOMEN", "THORAX", (6, "THORAX")), ("", "ANY", (0, "")), ("ABCXYZ", "XYZABC", (3, "ABC")),
     ("ABC", "", (0, "")), ("AAAA", "AA", (2, "AA"))],
)
def test_lcs_examples(a, b, expected):
    assert longest_common_substring(a, b) == expected
    assert brute_force_lcs(a, b) == expected


def test_lcs_agrees_with_brute_force_on_random_pairs():
    rng = random.Random(20240917)
    for _ in range(1000):
        # a small alphabet makes long shared runs likely
        alphabet = ALPHABET if rng.random() < 0.5 else "AB "
        a = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 64)))
        b = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 64)))
        assert longest_common_substring(a, b) == brute_force_lcs(a, b), (a, b)


@given(st.text(ALPHABET, max_size=40), st.text(ALPHABET, max_size=40))
def test_lcs_symmetric_length_and_is_common(a, b):
    n, sub = longest_common_substring(a, b)
    assert longest_common_substring(b, a)[0] == n
    assert len(sub) == n and sub in a and sub in b


def test_match_keyword_examples():
    assert match_keyword("SCREENING THORAX PA", "THORAX", False) == ("THORAX", 6, True)
    assert match_keyword("CT HEAD", "HAND", True) is None
    assert match_keyword("US HAND LINKS", "HAND", True) == ("HAND", 4, True)


def test_partial_threshold_boundary():
    # common run of exactly 5 chars is rejected, 6 is accepted
    assert match_keyword("XX ABCDE YY", "ABCDEFGH", False) is None
    assert match_keyword("XX ABCDEF YY", "ABCDEFGH", False) == ("ABCDEFGH", 6, False)


def test_short_keyword_needs_whole_token():
    assert match_keyword("HANDGELENK", "HAND", True) is None
    assert match_keyword("LEFT HAND", "HAND", True) == ("HAND", 4, True)
    assert match_keyword("HAND", "HAND", True) == ("HAND", 4, True)
    assert match_keyword("XHAND Y", "HAND", True) is None


_TOY = parse_mapping_db(
    "A\tClass A\tCT\t\tTHORAX\n"
    "B\tClass B\tCT\t\tABDOMEN\n"
    "C\tClass C\tCR\t\tPELVIS\n"
    "D\tClass D\tCR\t\tPELVIC\tKNEE\n"
)


def test_best_keyword_match_examples():
    assert best_keyword_match("SOMETHING THORAX", _TOY).class_id == "A"
    hit = best_keyword_match("THORAX ABDOMEN", _TOY)
    assert (hit.class_id, hit.match_length) == ("B", 7)
    # PELVIS vs PELVIC share only "PELVI" (5 chars); a text containing both ties at 6
    assert best_keyword_match("PELVIS PELVIC", _TOY) is None
    assert best_keyword_match("LEFT KNEE", _TOY).class_id == "D"
    assert best_keyword_match("", _TOY) is None


@given(st.text(ALPHABET, max_size=40))
def test_best_match_respects_minimums(text):
    hit = best_keyword_match(normalize_text(text), _TOY)
    if hit is not None:
        if hit.matched_keyword == "KNEE":
            assert hit.match_length >= MIN_SHORT_LENGTH and hit.exact
        else:
            assert hit.match_length >= MIN_PARTIAL_LENGTH


def test_every_shipped_keyword_matches_its_own_class(db):
    for cid, kw, _ in db.iter_keywords():
        hit = best_keyword_match(kw, db)
        assert hit is not None and hit.class_id == cid, (cid, kw)
