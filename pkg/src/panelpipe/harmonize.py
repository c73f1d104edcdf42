"""Map extracted headers to standard field categories and place names to
canonical counties.

Matching runs exact -> alias -> fuzzy, with special entities (city carve-outs
like Chicago) participating before the fuzzy stage so they can never be
swallowed by a nearby county name. All matching happens on normalized names;
the fuzzy stage uses normalized edit-distance similarity from the kernels
module.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from . import kernels
from .tables import RawTable

logger = logging.getLogger(__name__)

__all__ = [
    "FIELD_CATEGORIES",
    "MappingDecision",
    "CountyRef",
    "FieldMapper",
    "ProviderFieldMapper",
    "load_field_reference",
    "load_county_ref",
    "normalize_name",
    "harmonize_fields",
    "standardize_counties",
    "duplicate_targets",
    "classify_layout",
    "header_signature",
    "DEFAULT_FUZZY_THRESHOLD",
    "COUNTY_SORTED",
    "YEAR_SORTED",
]

FIELD_CATEGORIES = (
    "Automobiles",
    "Trucks",
    "Trailers",
    "Motorcycles",
    "Buses",
    "Total Vehicles",
    "Other",
)

DEFAULT_FUZZY_THRESHOLD = 0.84

COUNTY_SORTED = "county_sorted"
YEAR_SORTED = "year_sorted"

_YEAR_RANGE = (1900, 1970)

_PUNCT = str.maketrans({c: " " for c in ".,;:'\"()[]&/\\!?*"})

# Dominant historical abbreviation; expanded before any matching.
_TOKEN_EXPANSIONS = {"st": "saint", "ste": "sainte"}


def normalize_name(name: str) -> str:
    """Case-fold, strip punctuation, collapse whitespace, expand St. -> Saint."""
    tokens = name.casefold().translate(_PUNCT).split()
    return " ".join(_TOKEN_EXPANSIONS.get(t, t) for t in tokens)


@dataclass(frozen=True)
class MappingDecision:
    raw: str
    canonical: Optional[str]
    method: str  # exact | alias | fuzzy | provider | unmapped
    score: float

    EXACT = "exact"
    ALIAS = "alias"
    FUZZY = "fuzzy"
    PROVIDER = "provider"
    UNMAPPED = "unmapped"

    @property
    def mapped(self) -> bool:
        return self.canonical is not None

    def to_record(self) -> dict:
        return {
            "raw": self.raw,
            "canonical": self.canonical,
            "method": self.method,
            "score": round(self.score, 6),
        }


def _unmapped(raw: str) -> MappingDecision:
    return MappingDecision(raw, None, MappingDecision.UNMAPPED, 0.0)


class _StagedMatcher:
    """Shared exact/alias/fuzzy cascade over a normalized vocabulary."""

    def __init__(self, targets: Mapping[str, str], aliases: Mapping[str, str],
                 threshold: float):
        # targets: normalized form -> canonical; aliases likewise.
        self.targets = dict(targets)
        self.aliases = dict(aliases)
        self.threshold = threshold

    def match(self, raw: str) -> MappingDecision:
        norm = normalize_name(raw)
        hit = self.targets.get(norm)
        if hit is not None:
            return MappingDecision(raw, hit, MappingDecision.EXACT, 1.0)
        hit = self.aliases.get(norm)
        if hit is not None:
            return MappingDecision(raw, hit, MappingDecision.ALIAS, 1.0)
        if not norm:
            return _unmapped(raw)
        # Fuzzy scans canonical names and aliases alike, so an OCR slip on a
        # known variant still lands on that variant's target.
        vocabulary = dict(self.aliases)
        vocabulary.update(self.targets)
        best_name, best_score = None, -1.0
        for cand_norm, canonical in sorted(vocabulary.items()):
            score = kernels.similarity(norm, cand_norm)
            if score > best_score:
                best_name, best_score = canonical, score
        if best_name is not None and best_score >= self.threshold:
            return MappingDecision(raw, best_name, MappingDecision.FUZZY, best_score)
        return _unmapped(raw)


# ---------------------------------------------------------------------------
# Field categories
# ---------------------------------------------------------------------------


class FieldMapper:
    """Deterministic header-to-category mapper (the offline default)."""

    def __init__(self, categories: Sequence[str] = FIELD_CATEGORIES,
                 aliases: Optional[Mapping[str, str]] = None,
                 threshold: float = DEFAULT_FUZZY_THRESHOLD):
        self.categories = tuple(categories)
        alias_map = {normalize_name(a): c for a, c in (aliases or {}).items()}
        target_map = {normalize_name(c): c for c in self.categories}
        self._matcher = _StagedMatcher(target_map, alias_map, threshold)

    def map_header(self, header: str) -> MappingDecision:
        decision = self._matcher.match(header)
        if decision.mapped and decision.canonical not in self.categories:
            return _unmapped(header)
        return decision


class ProviderFieldMapper:
    """Header mapper backed by a model provider, with deterministic fallback.

    The provider is asked to emit one "header,category" line per input header.
    Any transport failure downgrades to the deterministic mapper for the whole
    batch (logged); malformed or off-list answers downgrade per header.
    """

    def __init__(self, provider, model_id: str, fallback: FieldMapper,
                 max_output: int = 1024):
        self.provider = provider
        self.model_id = model_id
        self.fallback = fallback
        self.max_output = max_output

    def _prompt(self, headers: Sequence[str]) -> str:
        cats = ", ".join(self.fallback.categories)
        lines = "\n".join(headers)
        return (
            "You map table column headers to a fixed list of field categories.\n"
            f"Categories: {cats}\n"
            "Answer with one CSV line per header, exactly: header,category.\n"
            "Use the category Other when nothing fits.\n"
            "Headers:\n" + lines
        )

    def map_headers(self, headers: Sequence[str]) -> dict:
        from .providers import ProviderUnavailable, ProviderRequest

        request = ProviderRequest(
            model_id=self.model_id,
            prompt=self._prompt(headers),
            image=b"",
            media_type="text/plain",
            max_output=self.max_output,
        )
        try:
            response = self.provider.complete(request)
        except ProviderUnavailable:
            logger.warning("provider field mapper unavailable; using deterministic mapper")
            return {h: self.fallback.map_header(h) for h in headers}

        answers = {}
        for row in csv.reader(response.text.splitlines()):
            if len(row) >= 2:
                answers[normalize_name(row[0])] = row[1].strip()
        out = {}
        for h in headers:
            cat = answers.get(normalize_name(h))
            if cat in self.fallback.categories:
                out[h] = MappingDecision(h, cat, MappingDecision.PROVIDER, 1.0)
            else:
                out[h] = self.fallback.map_header(h)
        return out


def harmonize_fields(headers: Sequence[str], mapper) -> dict:
    """Map every header to a category or an explicit unmapped decision."""
    if hasattr(mapper, "map_headers"):
        return mapper.map_headers(headers)
    return {h: mapper.map_header(h) for h in headers}


def load_field_reference(categories_path: Path, aliases_path: Path):
    """Load the category list and alias pairs from their CSV fixtures."""
    categories = []
    with open(categories_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            categories.append(row["category"].strip())
    aliases = {}
    with open(aliases_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            aliases[row["alias"].strip()] = row["category"].strip()
    return tuple(categories), aliases


# ---------------------------------------------------------------------------
# Counties
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CountyRef:
    """Canonical counties for one state plus any special carve-out entities."""

    state: str
    entries: tuple  # ((canonical_name, county_id), ...)
    special_entities: tuple = ()
    aliases: tuple = ()  # ((raw, canonical_name), ...)

    def __post_init__(self):
        names = [n for n, _ in self.entries] + [n for n, _ in self.special_entities]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate canonical names in {self.state} reference")

    @property
    def id_by_name(self) -> dict:
        out = {n: i for n, i in self.entries}
        out.update({n: i for n, i in self.special_entities})
        return out

    def county_names(self) -> list:
        return [n for n, _ in self.entries]

    def special_names(self) -> set:
        return {n for n, _ in self.special_entities}


def load_county_ref(state: str, counties_dir: Path,
                    specials_dir: Optional[Path] = None,
                    aliases_dir: Optional[Path] = None) -> CountyRef:
    entries = []
    with open(Path(counties_dir) / f"{state}.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            entries.append((row["canonical_name"].strip(), row["county_id"].strip()))
    specials = []
    if specials_dir is not None:
        path = Path(specials_dir) / f"{state}.csv"
        if path.exists():
            with open(path, newline="", encoding="utf-8") as fh:
                for row in csv.DictReader(fh):
                    specials.append((row["entity_name"].strip(), row["county_id"].strip()))
    aliases = []
    if aliases_dir is not None:
        path = Path(aliases_dir) / f"{state}.csv"
        if path.exists():
            with open(path, newline="", encoding="utf-8") as fh:
                for row in csv.DictReader(fh):
                    aliases.append((row["raw"].strip(), row["canonical_name"].strip()))
    return CountyRef(state=state, entries=tuple(entries),
                     special_entities=tuple(specials), aliases=tuple(aliases))


def _county_matcher(ref: CountyRef, threshold: float) -> _StagedMatcher:
    targets = {normalize_name(n): n for n, _ in ref.entries}
    targets.update({normalize_name(n): n for n, _ in ref.special_entities})
    aliases = {normalize_name(raw): canonical for raw, canonical in ref.aliases}
    return _StagedMatcher(targets, aliases, threshold)


def standardize_counties(raw_names: Iterable[str], ref: CountyRef,
                         threshold: float = DEFAULT_FUZZY_THRESHOLD) -> dict:
    """Resolve raw place names against one state's reference list.

    Unmapped is a value, never an error. When two distinct raw names land on
    the same canonical county (and it is not a special entity) a table-level
    warning is logged; the caller decides what to do with the collision.
    """
    matcher = _county_matcher(ref, threshold)
    decisions = {}
    for raw in raw_names:
        if raw not in decisions:
            decisions[raw] = matcher.match(raw)
    for canonical, raws in duplicate_targets(decisions, ref).items():
        logger.warning(
            "county %r in %s matched by %d distinct raw names: %s",
            canonical, ref.state, len(raws), ", ".join(sorted(raws)),
        )
    return decisions


def duplicate_targets(decisions: Mapping[str, MappingDecision], ref: CountyRef) -> dict:
    """Non-special canonical targets hit by more than one distinct raw name."""
    specials = ref.special_names()
    by_target = {}
    for raw, d in decisions.items():
        if d.mapped and d.canonical not in specials:
            by_target.setdefault(d.canonical, []).append(raw)
    return {c: raws for c, raws in by_target.items() if len(raws) > 1}


# ---------------------------------------------------------------------------
# Layout classification and vintage signatures
# ---------------------------------------------------------------------------


def classify_layout(table: RawTable, ref: CountyRef,
                    threshold: float = DEFAULT_FUZZY_THRESHOLD) -> str:
    """Decide whether rows run down counties or down years.

    Majority vote over the first column: reference-list hits (exact or alias
    only; fuzzy would never fire on a year) versus plausible 4-digit years.
    Ties go to county_sorted with a warning.
    """
    matcher = _county_matcher(ref, threshold)
    county_hits = 0
    year_hits = 0
    for row in table.data_rows:
        if not row:
            continue
        cell = row[0]
        if cell.kind == "numeric":
            if _YEAR_RANGE[0] <= (cell.value or 0) <= _YEAR_RANGE[1]:
                year_hits += 1
        elif cell.kind == "text":
            decision = matcher.match(cell.raw)
            if decision.method in (MappingDecision.EXACT, MappingDecision.ALIAS):
                county_hits += 1
    if year_hits > county_hits:
        return YEAR_SORTED
    if year_hits == county_hits and year_hits > 0:
        logger.warning(
            "table %s: first column splits %d/%d between years and counties; "
            "defaulting to county_sorted",
            table.provenance.table_id, year_hits, county_hits,
        )
    return COUNTY_SORTED


def header_signature(state: str, categories: Sequence[str]) -> str:
    """Vintage id: layout group keyed by state and the ordered category list."""
    digest = hashlib.sha1("|".join(categories).encode("utf-8")).hexdigest()[:8]
    return f"{state}-{digest}"
