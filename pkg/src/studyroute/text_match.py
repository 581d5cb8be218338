"""Text normalization and substring matching against the keyword registry."""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

if TYPE_CHECKING:
    from studyroute.mapping_db import MappingDatabase

MIN_PARTIAL_LENGTH = 6
MIN_SHORT_LENGTH = 4

_NON_ALNUM = re.compile(r"[^A-Z0-9]+")


@dataclass(frozen=True)
class MatchResult:
    class_id: str
    matched_keyword: str
    match_length: int
    exact: bool


def normalize_text(s: Optional[str]) -> str:
    """Canonical matching form: ASCII uppercase words separated by single spaces.

    Accented letters are reduced to their base letter via NFKD decomposition;
    characters without an ASCII decomposition are dropped.
    """
    if not s:
        return ""
    decomposed = unicodedata.normalize("NFKD", s)
    ascii_only = decomposed.encode("ascii", "ignore").decode("ascii")
    return _NON_ALNUM.sub(" ", ascii_only.upper()).strip()


def longest_common_substring(a: str, b: str) -> tuple[int, str]:
    """Longest contiguous common substring of ``a`` and ``b``.

    Dynamic programming over a single rolling row, O(len(a) * len(b)).
    Ties go to the occurrence starting earliest in ``a``.
    """
    if not a or not b:
        return 0, ""
    best_len = 0
    best_end = 0
    prev = [0] * (len(b) + 1)
    for i, ca in enumerate(a, start=1):
        cur = [0] * (len(b) + 1)
        for j, cb in enumerate(b, start=1):
            if ca == cb:
                n = prev[j - 1] + 1
                cur[j] = n
                # strict '>' keeps the first (earliest-ending, hence earliest-starting) run
                if n > best_len:
                    best_len = n
                    best_end = i
        prev = cur
    return best_len, a[best_end - best_len : best_end]


def _contains_token_run(text: str, keyword: str) -> bool:
    return f" {keyword} " in f" {text} "


def _grams(s: str, n: int = MIN_PARTIAL_LENGTH) -> set[str]:
    return {s[i : i + n] for i in range(len(s) - n + 1)}


def match_keyword(text: str, keyword: str, is_short: bool) -> Optional[tuple[str, int, bool]]:
    """Match one keyword against normalized text.

    Returns ``(keyword, length, exact)`` or None. Short keywords must occur as
    whole space-delimited tokens; long keywords need a common substring of at
    least six characters.
    """
    return _match(text, keyword, is_short, None)


def _match(text: str, keyword: str, is_short: bool, text_grams: Optional[set[str]]):
    if not text or not keyword:
        return None
    if is_short:
        if len(keyword) >= MIN_SHORT_LENGTH and _contains_token_run(text, keyword):
            return keyword, len(keyword), True
        return None
    # any common run of >= 6 chars contains a shared 6-gram
    if text_grams is not None and text_grams.isdisjoint(_grams(keyword)):
        return None
    length, _ = longest_common_substring(text, keyword)
    if length < MIN_PARTIAL_LENGTH:
        return None
    return keyword, length, length == len(keyword)


def best_keyword_match(text: str, db: "MappingDatabase") -> Optional[MatchResult]:
    """Longest keyword match over every class; None when the best length is ambiguous across classes."""
    if not text:
        return None
    best: Optional[MatchResult] = None
    rival_classes: set[str] = set()
    grams = _grams(text)
    for class_id, keyword, is_short in db.iter_keywords():
        hit = _match(text, keyword, is_short, grams)
        if hit is None:
            continue
        kw, length, exact = hit
        if best is None or length > best.match_length:
            best = MatchResult(class_id, kw, length, exact)
            rival_classes = {class_id}
        elif length == best.match_length:
            rival_classes.add(class_id)
    if best is None or len(rival_classes) > 1:
        return None
    return best
