"""Duplicate-reading resolution.

Overlapping source documents (a publication printing both current and prior
year figures, reissues, multiple models) produce several readings for one
(county, year, field) key. An eight-rule cascade picks a single survivor
without ever consulting gold data: each rule narrows the surviving set to its
best subset, a rule that would wipe out every survivor is skipped, and the
final rule breaks any remaining tie by lowest document ingestion number.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

from .panel import PanelObservation

logger = logging.getLogger(__name__)

__all__ = ["DedupContext", "resolve_duplicates", "RULE_NAMES"]

RULE_NAMES = (
    "vintage_frequency",
    "state_aggregatable",
    "model_count",
    "model_agreement",
    "state_total_accuracy",
    "state_rate_proximity",
    "gold_available",
    "lowest_ingestion",
)


@dataclass(frozen=True)
class DedupContext:
    """Reference signals the cascade consults.

    vintage_counts: documents sharing each vintage_id.
    full_coverage: source keys of tables covering every county on the state
        reference list (the ones whose sums can be checked against state totals).
    state_total_error: |table state sum - published state total| per source key,
        present only where both sides exist.
    state_rate: published state total / state population, per (state, year).
    population: county population lookup, (county_id, year) -> value or None.
    """

    vintage_counts: Mapping[str, int] = field(default_factory=dict)
    full_coverage: frozenset = frozenset()
    state_total_error: Mapping[tuple, float] = field(default_factory=dict)
    state_rate: Mapping[tuple, float] = field(default_factory=dict)
    population: Optional[Callable[[str, int], Optional[float]]] = None

    def pop(self, county_id: str, year: int) -> Optional[float]:
        if self.population is None:
            return None
        return self.population(county_id, year)


def _keep_max(survivors: list, crit) -> list:
    best = max(crit(r) for r in survivors)
    return [r for r in survivors if crit(r) == best]


def _keep_min_defined(survivors: list, crit) -> list:
    scored = [(crit(r), r) for r in survivors]
    defined = [(s, r) for s, r in scored if s is not None]
    if not defined:
        return survivors
    best = min(s for s, _ in defined)
    return [r for s, r in defined if s == best]


def _keep_where(survivors: list, pred) -> list:
    kept = [r for r in survivors if pred(r)]
    return kept if kept else survivors


def _rule_vintage(survivors, ctx: DedupContext):
    return _keep_max(survivors, lambda r: ctx.vintage_counts.get(r.provenance.vintage_id, 0))


def _rule_aggregatable(survivors, ctx: DedupContext):
    return _keep_where(survivors, lambda r: r.provenance.source_key in ctx.full_coverage)


def _rule_model_count(survivors, ctx: DedupContext):
    return _keep_max(survivors, lambda r: len(r.model_support))


def _rule_model_agreement(survivors, ctx: DedupContext):
    def agrees(r: PanelObservation) -> bool:
        values = list(r.model_values.values())
        return len(values) >= 2 and len(set(values)) == 1

    return _keep_where(survivors, agrees)


def _rule_total_accuracy(survivors, ctx: DedupContext):
    return _keep_min_defined(
        survivors, lambda r: ctx.state_total_error.get(r.provenance.source_key)
    )


def _rule_rate_proximity(survivors, ctx: DedupContext):
    def distance(r: PanelObservation) -> Optional[float]:
        rate = ctx.state_rate.get((r.state, r.year))
        pop = ctx.pop(r.county_id, r.year)
        if rate is None or pop is None or pop <= 0:
            return None
        return abs(r.value / pop - rate)

    return _keep_min_defined(survivors, distance)


def _rule_gold(survivors, ctx: DedupContext):
    return _keep_where(survivors, lambda r: r.gold_available)


def _rule_ingestion(survivors, ctx: DedupContext):
    return _keep_max(survivors, lambda r: -r.provenance.ingestion_number)


_RULES = (
    _rule_vintage,
    _rule_aggregatable,
    _rule_model_count,
    _rule_model_agreement,
    _rule_total_accuracy,
    _rule_rate_proximity,
    _rule_gold,
    _rule_ingestion,
)


def _final_order(r: PanelObservation) -> tuple:
    p = r.provenance
    return (p.ingestion_number, p.document_id, p.page, p.model_id, r.value)


def resolve_duplicates(readings: Sequence[PanelObservation],
                       context: DedupContext) -> PanelObservation:
    """Pick the single surviving reading for one (county, year, field) key.

    Deterministic and invariant to input order: rules compare values only,
    and the residual tie after rule 8 falls back to a total order over the
    provenance fields.
    """
    if not readings:
        raise ValueError("resolve_duplicates requires at least one reading")
    keys = {(r.county_id, r.state, r.year, r.field) for r in readings}
    if len(keys) > 1:
        raise ValueError(f"readings span multiple keys: {sorted(keys)}")

    survivors = sorted(readings, key=_final_order)
    for rule in _RULES:
        if len(survivors) == 1:
            break
        survivors = rule(survivors, context)
    return min(survivors, key=_final_order)
