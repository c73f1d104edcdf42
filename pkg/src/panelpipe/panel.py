"""Aligned tables, panel observations, totals derivation, and population join.

Row keys are (county_id, year) so county-sorted tables (year fixed per table)
and year-sorted tables (county fixed per table) share one shape; for a
county-sorted table every key carries the table's own year.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional

from .harmonize import (
    COUNTY_SORTED,
    YEAR_SORTED,
    CountyRef,
    MappingDecision,
)
from .tables import RawTable, TableProvenance

logger = logging.getLogger(__name__)

__all__ = [
    "AlignedTable",
    "AlignStats",
    "AlignmentEmpty",
    "PanelObservation",
    "PopulationSeries",
    "StateTotalsRef",
    "TOTAL_VEHICLES",
    "AUTOMOBILES",
    "TRUCKS",
    "TRAILERS",
    "align_table",
    "derive_total_vehicles",
    "derive_total_with_flag",
    "join_population",
]

AUTOMOBILES = "Automobiles"
TRUCKS = "Trucks"
TRAILERS = "Trailers"
TOTAL_VEHICLES = "Total Vehicles"

_YEAR_RANGE = (1900, 1970)


class AlignmentEmpty(Exception):
    """No county row could be mapped; the table is excluded and reported."""


@dataclass(frozen=True)
class AlignStats:
    rows_in: int = 0
    rows_mapped: int = 0
    rows_unmapped: int = 0
    rows_duplicate_county: int = 0
    columns_in: int = 0
    columns_mapped: int = 0
    columns_unmapped: int = 0
    columns_duplicate_category: int = 0
    cells_nonnumeric_dropped: int = 0

    def to_record(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class AlignedTable:
    """Canonical rows (county_id, year) by standardized field columns.

    ``model_values`` keeps each contributing model's own value per cell; for a
    single-model table that is just {model_id: value}, after ensembling it
    holds every responding model.
    """

    provenance: TableProvenance
    rows: Mapping[tuple, Mapping[str, Optional[float]]]
    model_values: Mapping[tuple, Mapping[str, Mapping[str, float]]] = field(default_factory=dict)
    layout: str = COUNTY_SORTED
    stats: AlignStats = field(default_factory=AlignStats)

    @property
    def table_id(self) -> str:
        return self.provenance.table_id

    def counties(self) -> list:
        return sorted({county for county, _ in self.rows})

    def fields(self) -> list:
        return sorted({f for row in self.rows.values() for f in row})


def align_table(raw: RawTable, field_map: Mapping[str, MappingDecision],
                county_map: Mapping[str, MappingDecision], layout: str,
                ref: CountyRef) -> AlignedTable:
    """Turn a structurally valid table into canonical (county, year) rows.

    Unmapped columns and rows are dropped and counted, never fatal; a table
    with zero mappable county rows raises AlignmentEmpty.
    """
    names = raw.column_names
    columns: list = []  # (column index, category)
    seen_categories = set()
    cols_unmapped = 0
    cols_duplicate = 0
    for i in range(1, raw.column_count):
        name = names[i] if i < len(names) else ""
        decision = field_map.get(name)
        if decision is None or not decision.mapped:
            cols_unmapped += 1
            continue
        if decision.canonical in seen_categories:
            cols_duplicate += 1
            continue
        seen_categories.add(decision.canonical)
        columns.append((i, decision.canonical))
    if not columns:
        raise AlignmentEmpty(
            f"table {raw.provenance.table_id}: no header mapped to a field category"
        )

    id_by_name = ref.id_by_name
    rows: dict = {}
    model_values: dict = {}
    rows_unmapped = 0
    rows_duplicate = 0
    cells_dropped = 0
    model_id = raw.provenance.model_id

    table_county_id: Optional[str] = None
    if layout == YEAR_SORTED:
        county_name = raw.provenance.county
        if county_name:
            decision = county_map.get(county_name)
            if decision is not None and decision.mapped:
                table_county_id = id_by_name.get(decision.canonical)
        if table_county_id is None:
            raise AlignmentEmpty(
                f"year-sorted table {raw.provenance.table_id} has no mappable county metadata"
            )

    for row in raw.data_rows:
        if not row:
            continue
        key_cell = row[0]
        if layout == COUNTY_SORTED:
            if key_cell.kind != "text":
                rows_unmapped += 1
                continue
            decision = county_map.get(key_cell.raw)
            if decision is None or not decision.mapped:
                rows_unmapped += 1
                continue
            key = (id_by_name[decision.canonical], raw.provenance.year)
        else:
            if key_cell.kind != "numeric" or not (
                _YEAR_RANGE[0] <= (key_cell.value or 0) <= _YEAR_RANGE[1]
            ):
                rows_unmapped += 1
                continue
            key = (table_county_id, int(key_cell.value))
        if key in rows:
            rows_duplicate += 1
            continue

        row_values: dict = {}
        row_models: dict = {}
        for col, category in columns:
            cell = row[col] if col < len(row) else None
            if cell is None or cell.kind == "empty":
                row_values[category] = None
            elif cell.kind == "numeric":
                row_values[category] = float(cell.value)
                row_models[category] = {model_id: float(cell.value)}
            else:
                row_values[category] = None
                cells_dropped += 1
        rows[key] = row_values
        model_values[key] = row_models

    if not rows:
        raise AlignmentEmpty(f"table {raw.provenance.table_id}: zero mapped county rows")

    stats = AlignStats(
        rows_in=len(raw.data_rows),
        rows_mapped=len(rows),
        rows_unmapped=rows_unmapped,
        rows_duplicate_county=rows_duplicate,
        columns_in=max(raw.column_count - 1, 0),
        columns_mapped=len(columns),
        columns_unmapped=cols_unmapped,
        columns_duplicate_category=cols_duplicate,
        cells_nonnumeric_dropped=cells_dropped,
    )
    return AlignedTable(provenance=raw.provenance, rows=rows,
                        model_values=model_values, layout=layout, stats=stats)


# ---------------------------------------------------------------------------
# Totals
# ---------------------------------------------------------------------------


def derive_total_with_flag(row: Mapping[str, Optional[float]]):
    """Total vehicles for one row, plus an anomaly flag.

    A directly reported total wins. Otherwise automobiles + trucks, less
    trailers when present; if that comes out negative the value is withheld
    and the anomaly flag is set.
    """
    direct = row.get(TOTAL_VEHICLES)
    if direct is not None:
        return direct, False
    autos = row.get(AUTOMOBILES)
    trucks = row.get(TRUCKS)
    if autos is None or trucks is None:
        return None, False
    trailers = row.get(TRAILERS)
    total = autos + trucks - (trailers if trailers is not None else 0.0)
    if total < 0:
        return None, True
    return total, False


def derive_total_vehicles(row: Mapping[str, Optional[float]]) -> Optional[float]:
    value, _ = derive_total_with_flag(row)
    return value


# ---------------------------------------------------------------------------
# Panel observations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PanelObservation:
    """One (county, state, year, field) reading with lineage and flags."""

    county_id: str
    state: str
    year: int
    field: str
    value: float
    provenance: TableProvenance
    model_support: frozenset = frozenset()
    model_values: Mapping[str, float] = None  # type: ignore[assignment]
    gold_available: bool = False
    per_capita: Optional[float] = None
    log_rate: Optional[float] = None
    flags: tuple = ()

    def __post_init__(self):
        if self.value < 0:
            raise ValueError("panel values are non-negative counts")
        if self.model_values is None:
            object.__setattr__(self, "model_values", {})

    @property
    def key(self) -> tuple:
        return (self.state, self.county_id, self.year, self.field)

    def to_record(self) -> dict:
        return {
            "county_id": self.county_id,
            "state": self.state,
            "year": self.year,
            "field": self.field,
            "value": self.value,
            "per_capita": self.per_capita,
            "log_rate": self.log_rate,
            "document_id": self.provenance.document_id,
            "page": self.provenance.page,
            "model_id": self.provenance.model_id,
            "vintage_id": self.provenance.vintage_id,
            "ingestion_number": self.provenance.ingestion_number,
            "model_support": sorted(self.model_support),
            "gold_available": self.gold_available,
            "flags": list(self.flags),
        }


def observations_from_aligned(aligned: AlignedTable, state: str,
                              gold_keys: Optional[set] = None) -> list:
    """Expand an aligned table into per-cell observations.

    Adds a derived Total Vehicles observation when the table does not report
    one directly; its per-model values are derived model-by-model so the
    cross-model agreement rule can still see them.
    """
    gold_keys = gold_keys or set()
    out = []
    for key in sorted(aligned.rows):
        county_id, year = key
        row = aligned.rows[key]
        per_model = aligned.model_values.get(key, {})
        for fieldname in sorted(row):
            value = row[fieldname]
            if value is None:
                continue
            support = per_model.get(fieldname, {})
            out.append(PanelObservation(
                county_id=county_id,
                state=state,
                year=year,
                field=fieldname,
                value=value,
                provenance=aligned.provenance,
                model_support=frozenset(support) or frozenset({aligned.provenance.model_id}),
                model_values=dict(support),
                gold_available=(aligned.table_id, county_id, fieldname) in gold_keys,
            ))
        if row.get(TOTAL_VEHICLES) is None:
            value, anomaly = derive_total_with_flag(row)
            if value is not None:
                models = sorted({m for cell in per_model.values() for m in cell})
                derived_models = {}
                for m in models:
                    model_row = {f: per_model.get(f, {}).get(m) for f in row}
                    mv, _ = derive_total_with_flag(model_row)
                    if mv is not None:
                        derived_models[m] = mv
                out.append(PanelObservation(
                    county_id=county_id,
                    state=state,
                    year=year,
                    field=TOTAL_VEHICLES,
                    value=value,
                    provenance=aligned.provenance,
                    model_support=frozenset(derived_models) or frozenset({aligned.provenance.model_id}),
                    model_values=derived_models,
                    gold_available=(aligned.table_id, county_id, TOTAL_VEHICLES) in gold_keys,
                    flags=("derived_total",),
                ))
            elif anomaly:
                logger.warning(
                    "table %s county %s year %s: negative derived total withheld",
                    aligned.table_id, county_id, year,
                )
    return out


# ---------------------------------------------------------------------------
# Population
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PopulationSeries:
    """Decennial census counts for one county, interpolated linearly between."""

    county_id: str
    decennial: Mapping[int, float]

    def interpolated(self, year: int) -> Optional[float]:
        if not self.decennial:
            return None
        years = sorted(self.decennial)
        if year in self.decennial:
            return float(self.decennial[year])
        if year < years[0] or year > years[-1]:
            return None
        lo = max(y for y in years if y < year)
        hi = min(y for y in years if y > year)
        frac = (year - lo) / (hi - lo)
        return self.decennial[lo] + frac * (self.decennial[hi] - self.decennial[lo])


@dataclass(frozen=True)
class StateTotalsRef:
    """External state-level registration totals (e.g. highway statistics)."""

    totals: Mapping[tuple, float]  # (state, year) -> total

    def __post_init__(self):
        for key, total in self.totals.items():
            if total <= 0:
                raise ValueError(f"state total must be positive: {key}")

    def get(self, state: str, year: int) -> Optional[float]:
        return self.totals.get((state, year))


def join_population(observations: Iterable[PanelObservation],
                    series_by_county: Mapping[str, PopulationSeries]):
    """Attach per-capita and log rates; split off observations with no coverage.

    Returns (enriched, excluded). Excluded observations carry a
    ``no_population`` flag and stay out of the econometric sample.
    """
    enriched = []
    excluded = []
    for obs in observations:
        series = series_by_county.get(obs.county_id)
        pop = series.interpolated(obs.year) if series is not None else None
        if pop is None or pop <= 0:
            excluded.append(replace(obs, flags=obs.flags + ("no_population",)))
            continue
        rate = obs.value / pop
        log_rate = math.log(rate) if rate > 0 else None
        enriched.append(replace(obs, per_capita=rate, log_rate=log_rate))
    return enriched, excluded
