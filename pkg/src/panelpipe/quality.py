"""Rule-based outlier detection, gold-standard evaluation, and convergence
analysis.

The four outlier detectors consult only the panel and external reference data
(population, published state totals), never gold values, so they work on data
far outside any gold set. Evaluation compares extracted cells against
human-verified gold cells and produces the full metric battery; convergence
analysis reruns that evaluation on growing unions of gold folds to show when
the gold set is big enough.
"""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .panel import AUTOMOBILES, TOTAL_VEHICLES, AlignedTable, PanelObservation, PopulationSeries

logger = logging.getLogger(__name__)

__all__ = [
    "OutlierFlag",
    "GoldCell",
    "EvalReport",
    "ErrorOnlyBlock",
    "EmptyEvaluation",
    "FoldConfigError",
    "Thresholds",
    "detect_population_outliers",
    "detect_timeseries_outliers",
    "detect_crossfield_outliers",
    "detect_duplicate_outliers",
    "flatten_aligned",
    "evaluate_against_gold",
    "critical_failure_rate",
    "breakdown",
    "convergence_analysis",
    "render_eval_text",
]


@dataclass(frozen=True)
class Thresholds:
    """Outlier rule constants; every boundary is a strict inequality."""

    population_ratio: float = 2.0
    crossfield_low: float = 0.3
    crossfield_high: float = 1.0
    duplicate_ratio: float = 0.5
    change_pct: float = 100.0
    reversal_min_value: float = 100.0
    endpoint_min_value: float = 500.0


@dataclass(frozen=True)
class OutlierFlag:
    kind: str  # population | timeseries | crossfield | duplicate
    county_id: str
    year: int
    field: str
    detail: Mapping[str, object]
    table_id: str = ""

    @property
    def key(self) -> tuple:
        return (self.county_id, self.year, self.field)

    @property
    def flag_id(self) -> str:
        return f"{self.kind}:{self.county_id}:{self.year}:{self.field}"

    def to_record(self) -> dict:
        return {
            "flag_id": self.flag_id,
            "kind": self.kind,
            "county_id": self.county_id,
            "year": self.year,
            "field": self.field,
            "table_id": self.table_id,
            "detail": dict(self.detail),
        }


# ---------------------------------------------------------------------------
# Outlier detectors
# ---------------------------------------------------------------------------


def detect_population_outliers(panel: Iterable[PanelObservation],
                               series_by_county: Mapping[str, PopulationSeries],
                               thresholds: Thresholds = Thresholds()) -> list:
    """Flag values implausibly large against county population (ratio > 2)."""
    flags = []
    for obs in sorted(panel, key=lambda o: o.key):
        series = series_by_county.get(obs.county_id)
        pop = series.interpolated(obs.year) if series is not None else None
        if pop is None or pop <= 0:
            logger.warning(
                "population check skipped for %s %s %s: no usable population",
                obs.county_id, obs.year, obs.field,
            )
            continue
        ratio = obs.value / pop
        if ratio > thresholds.population_ratio:
            flags.append(OutlierFlag(
                kind="population",
                county_id=obs.county_id,
                year=obs.year,
                field=obs.field,
                detail={"value": obs.value, "population": pop, "ratio": ratio},
                table_id=obs.provenance.table_id,
            ))
    return flags


def _big_decline(prev: float, nxt: float, pct: float) -> bool:
    # Decline magnitude is measured against the later (smaller) value, so
    # "exceeding 100%" means more than halved.
    if nxt >= prev:
        return False
    if nxt == 0:
        return prev > 0
    return (prev - nxt) / nxt > pct / 100.0


def _big_increase(prev: float, nxt: float, pct: float) -> bool:
    if nxt <= prev:
        return False
    if prev == 0:
        return nxt > 0
    return (nxt - prev) / prev > pct / 100.0


def detect_timeseries_outliers(panel: Iterable[PanelObservation],
                               thresholds: Thresholds = Thresholds()) -> list:
    """Flag sharp reversals and anomalous first/last observations.

    Consecutive means adjacent observed years within one (county, field)
    series; gaps are allowed. A reversal flags the middle point when both
    adjacent changes exceed the threshold in opposite directions and the
    middle value itself exceeds 100; endpoint rules require the endpoint to
    exceed 500.
    """
    pct = thresholds.change_pct
    series: dict = {}
    for obs in panel:
        series.setdefault((obs.county_id, obs.field), []).append(obs)
    flags = []
    for key in sorted(series):
        points = sorted(series[key], key=lambda o: o.year)
        values = [o.value for o in points]
        n = len(points)
        if n < 2:
            continue
        for i in range(1, n - 1):
            down_up = (_big_decline(values[i - 1], values[i], pct)
                       and _big_increase(values[i], values[i + 1], pct))
            up_down = (_big_increase(values[i - 1], values[i], pct)
                       and _big_decline(values[i], values[i + 1], pct))
            if (down_up or up_down) and values[i] > thresholds.reversal_min_value:
                flags.append(OutlierFlag(
                    kind="timeseries",
                    county_id=points[i].county_id,
                    year=points[i].year,
                    field=points[i].field,
                    detail={
                        "sub_rule": "reversal",
                        "window": [values[i - 1], values[i], values[i + 1]],
                        "years": [points[i - 1].year, points[i].year, points[i + 1].year],
                    },
                    table_id=points[i].provenance.table_id,
                ))
        first_change = (_big_decline(values[0], values[1], pct)
                        or _big_increase(values[0], values[1], pct))
        if first_change and values[0] > thresholds.endpoint_min_value:
            flags.append(OutlierFlag(
                kind="timeseries",
                county_id=points[0].county_id,
                year=points[0].year,
                field=points[0].field,
                detail={"sub_rule": "first_obs", "window": values[:2],
                        "years": [p.year for p in points[:2]]},
                table_id=points[0].provenance.table_id,
            ))
        last_change = (_big_decline(values[-2], values[-1], pct)
                       or _big_increase(values[-2], values[-1], pct))
        if last_change and values[-1] > thresholds.endpoint_min_value:
            flags.append(OutlierFlag(
                kind="timeseries",
                county_id=points[-1].county_id,
                year=points[-1].year,
                field=points[-1].field,
                detail={"sub_rule": "last_obs", "window": values[-2:],
                        "years": [p.year for p in points[-2:]]},
                table_id=points[-1].provenance.table_id,
            ))
    return flags


def detect_crossfield_outliers(panel: Iterable[PanelObservation],
                               thresholds: Thresholds = Thresholds()) -> list:
    """Flag automobile/total ratios that are implausibly low or impossible."""
    autos: dict = {}
    totals: dict = {}
    for obs in panel:
        if obs.field == AUTOMOBILES:
            autos[(obs.county_id, obs.year)] = obs
        elif obs.field == TOTAL_VEHICLES:
            totals[(obs.county_id, obs.year)] = obs
    flags = []
    for key in sorted(autos.keys() & totals.keys()):
        a, t = autos[key], totals[key]
        if t.value == 0:
            suspicious = a.value > 0
            ratio = math.inf if suspicious else 0.0
        else:
            ratio = a.value / t.value
            suspicious = ratio < thresholds.crossfield_low or ratio > thresholds.crossfield_high
        if suspicious:
            flags.append(OutlierFlag(
                kind="crossfield",
                county_id=a.county_id,
                year=a.year,
                field=AUTOMOBILES,
                detail={"automobiles": a.value, "total": t.value,
                        "ratio": ratio if ratio != math.inf else None},
                table_id=a.provenance.table_id,
            ))
    return flags


def detect_duplicate_outliers(readings: Iterable[PanelObservation],
                              thresholds: Thresholds = Thresholds()) -> list:
    """Flag duplicate sets whose spread is large relative to their median.

    Uses the population standard deviation (duplicate sets are typically of
    size two, where a sample deviation degenerates). A zero median flags any
    nonzero spread.
    """
    groups: dict = {}
    for obs in readings:
        groups.setdefault((obs.county_id, obs.year, obs.field), []).append(obs)
    flags = []
    for key in sorted(groups):
        group = groups[key]
        if len(group) < 2:
            continue
        values = np.array([o.value for o in group], dtype=float)
        median = float(np.median(values))
        stdev = float(np.std(values))
        if median == 0:
            suspicious = stdev > 0
        else:
            suspicious = stdev / abs(median) > thresholds.duplicate_ratio
        if suspicious:
            lead = min(group, key=lambda o: o.provenance.ingestion_number)
            flags.append(OutlierFlag(
                kind="duplicate",
                county_id=key[0],
                year=key[1],
                field=key[2],
                detail={
                    "values": sorted(values.tolist()),
                    "median": median,
                    "stdev": stdev,
                    "ratio": (stdev / abs(median)) if median else None,
                    "tables": sorted({o.provenance.table_id for o in group}),
                },
                table_id=lead.provenance.table_id,
            ))
    return flags


# ---------------------------------------------------------------------------
# Gold-standard evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GoldCell:
    """One human-verified truth cell; value None means verified empty."""

    table_id: str
    county_id: str
    field: str
    value: Optional[float]

    @property
    def key(self) -> tuple:
        return (self.table_id, self.county_id, self.field)


class EmptyEvaluation(Exception):
    """No gold cells, or no matched pairs to correlate."""


class FoldConfigError(Exception):
    pass


@dataclass(frozen=True)
class ErrorOnlyBlock:
    r_squared_pct: float
    mean_error_units: float
    median_error_units: float
    mean_abs_error_units: float
    median_abs_error_units: float
    mean_error_pct: float
    median_error_pct: float
    mean_abs_error_pct: float
    median_abs_error_pct: float
    p75_abs_error_pct: float
    p95_abs_error_pct: float
    n_cells: int
    n_tables: int

    def to_record(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class EvalReport:
    r_squared_pct: float
    total_error_rate_pct: float
    missing_output_pct: float
    incorrect_output_pct: float
    mean_error_units: float
    mean_abs_error_units: float
    mean_error_pct: float
    mean_abs_error_pct: float
    error_only: Optional[ErrorOnlyBlock]
    n_cells: int
    n_tables: int
    n_missing: int
    n_incorrect: int

    def to_record(self) -> dict:
        rec = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "error_only"}
        rec["error_only"] = self.error_only.to_record() if self.error_only else None
        return rec


def flatten_aligned(tables: Iterable[AlignedTable]) -> dict:
    """Aligned tables as a flat {(table_id, county_id, field): value} map.

    Only cells the table actually carries are included; derived totals never
    enter evaluation because gold covers printed cells only.
    """
    cells: dict = {}
    for table in tables:
        for (county_id, _year), row in table.rows.items():
            for fieldname, value in row.items():
                cells[(table.table_id, county_id, fieldname)] = value
    return cells


def _round_half_even(value: float) -> float:
    return float(round(value))


def _r_squared_pct(true: np.ndarray, ext: np.ndarray, mode: str) -> float:
    if len(true) == 0:
        raise EmptyEvaluation("no matched pairs")
    if np.array_equal(true, ext):
        return 100.0
    if np.all(true == true[0]) or np.all(ext == ext[0]):
        return 0.0
    if mode == "regression":
        slope, intercept = np.polyfit(true, ext, 1)
        resid = ext - (intercept + slope * true)
        ss_tot = float(np.sum((ext - ext.mean()) ** 2))
        return 100.0 * (1.0 - float(np.sum(resid ** 2)) / ss_tot)
    corr = float(np.corrcoef(true, ext)[0, 1])
    return 100.0 * corr * corr


def evaluate_against_gold(extracted: Mapping[tuple, Optional[float]],
                          gold: Sequence[GoldCell],
                          r_squared_mode: str = "correlation") -> EvalReport:
    """Full metric battery of extracted cells against gold truth.

    missing: gold has a number, extraction has none. incorrect: both numeric
    and unequal after final (half-to-even) rounding, or extraction invented a
    value where gold is verified empty. Errors are extracted minus true;
    percentage errors use the true value as denominator and skip true == 0.

    Gold cells are processed in canonical key order, so any permutation of
    the same cells produces a bit-identical report.
    """
    if not gold:
        raise EmptyEvaluation("no gold cells")
    gold = sorted(gold, key=lambda c: c.key)

    n_cells = len(gold)
    tables = {g.table_id for g in gold}
    n_missing = 0
    n_incorrect = 0
    matched_true: list = []
    matched_ext: list = []
    incorrect_pairs: list = []
    incorrect_tables: set = set()

    for cell in gold:
        ext = extracted.get(cell.key)
        if ext is not None:
            ext = _round_half_even(ext)
        if cell.value is None:
            if ext is not None:
                n_incorrect += 1
                incorrect_tables.add(cell.table_id)
            continue
        if ext is None:
            n_missing += 1
            continue
        matched_true.append(float(cell.value))
        matched_ext.append(ext)
        if ext != float(cell.value):
            n_incorrect += 1
            incorrect_pairs.append((float(cell.value), ext))
            incorrect_tables.add(cell.table_id)

    true_arr = np.array(matched_true)
    ext_arr = np.array(matched_ext)
    r2 = _r_squared_pct(true_arr, ext_arr, r_squared_mode)

    errors = ext_arr - true_arr
    nonzero = true_arr != 0
    pct_errors = 100.0 * errors[nonzero] / true_arr[nonzero]

    error_only = None
    if incorrect_pairs:
        it = np.array([t for t, _ in incorrect_pairs])
        ie = np.array([e for _, e in incorrect_pairs])
        ierr = ie - it
        inz = it != 0
        ipct = 100.0 * ierr[inz] / it[inz]
        error_only = ErrorOnlyBlock(
            r_squared_pct=_r_squared_pct(it, ie, r_squared_mode),
            mean_error_units=float(ierr.mean()),
            median_error_units=float(np.median(ierr)),
            mean_abs_error_units=float(np.abs(ierr).mean()),
            median_abs_error_units=float(np.median(np.abs(ierr))),
            mean_error_pct=float(ipct.mean()) if len(ipct) else 0.0,
            median_error_pct=float(np.median(ipct)) if len(ipct) else 0.0,
            mean_abs_error_pct=float(np.abs(ipct).mean()) if len(ipct) else 0.0,
            median_abs_error_pct=float(np.median(np.abs(ipct))) if len(ipct) else 0.0,
            p75_abs_error_pct=float(np.percentile(np.abs(ipct), 75)) if len(ipct) else 0.0,
            p95_abs_error_pct=float(np.percentile(np.abs(ipct), 95)) if len(ipct) else 0.0,
            n_cells=len(incorrect_pairs),
            n_tables=len(incorrect_tables),
        )

    return EvalReport(
        r_squared_pct=r2,
        total_error_rate_pct=100.0 * (n_missing + n_incorrect) / n_cells,
        missing_output_pct=100.0 * n_missing / n_cells,
        incorrect_output_pct=100.0 * n_incorrect / n_cells,
        mean_error_units=float(errors.mean()) if len(errors) else 0.0,
        mean_abs_error_units=float(np.abs(errors).mean()) if len(errors) else 0.0,
        mean_error_pct=float(pct_errors.mean()) if len(pct_errors) else 0.0,
        mean_abs_error_pct=float(np.abs(pct_errors).mean()) if len(pct_errors) else 0.0,
        error_only=error_only,
        n_cells=n_cells,
        n_tables=len(tables),
        n_missing=n_missing,
        n_incorrect=n_incorrect,
    )


def critical_failure_rate(outcomes: Mapping[str, Sequence]) -> dict:
    """Failure percentage per source, side by side.

    ``outcomes`` maps a source name to per-table outcomes; each outcome is a
    bool or anything with an ``is_critical_failure`` attribute.
    """
    rates = {}
    for source in sorted(outcomes):
        per_table = outcomes[source]
        failures = 0
        for outcome in per_table:
            failed = outcome if isinstance(outcome, bool) else outcome.is_critical_failure
            failures += bool(failed)
        rates[source] = 100.0 * failures / len(per_table) if per_table else 0.0
    return rates


def breakdown(extracted: Mapping[tuple, Optional[float]],
              gold: Sequence[GoldCell],
              table_meta: Mapping[str, tuple],
              group_by: str,
              r_squared_mode: str = "correlation") -> dict:
    """Per-decade or per-state EvalReports; the groups partition the cells.

    ``table_meta`` maps table_id to (state, year).
    """
    if group_by not in ("decade", "state"):
        raise ValueError("group_by must be 'decade' or 'state'")
    groups: dict = {}
    for cell in gold:
        state, year = table_meta[cell.table_id]
        key = f"{(year // 10) * 10}s" if group_by == "decade" else state
        groups.setdefault(key, []).append(cell)
    out = {}
    for key in sorted(groups):
        try:
            out[key] = evaluate_against_gold(extracted, groups[key], r_squared_mode)
        except EmptyEvaluation:
            logger.warning("breakdown group %s has no matched pairs; skipped", key)
    return out


def convergence_analysis(extracted: Mapping[tuple, Optional[float]],
                         gold: Sequence[GoldCell],
                         folds: int,
                         step: int = 1,
                         split: tuple = (0.5, 0.5),
                         seed: int = 0,
                         r_squared_mode: str = "correlation") -> list:
    """Metric curves over cumulative unions of evaluation folds.

    Gold tables are shuffled with the given seed and dealt round-robin into
    ``folds`` folds; the first split[0] share is reserved for development and
    the rest is the evaluation side. Point k evaluates the union of the first
    k evaluation folds. Returns a list of dicts with the step size and the
    EvalReport per point.
    """
    table_ids = sorted({g.table_id for g in gold})
    if len(table_ids) < folds:
        raise FoldConfigError(
            f"{len(table_ids)} gold tables cannot fill {folds} folds"
        )
    if step < 1:
        raise FoldConfigError("step must be >= 1")
    rng = random.Random(seed)
    shuffled = list(table_ids)
    rng.shuffle(shuffled)
    fold_of: dict = {tid: i % folds for i, tid in enumerate(shuffled)}
    dev_folds = int(round(folds * split[0]))
    eval_folds = folds - dev_folds
    if eval_folds < 1:
        raise FoldConfigError("split leaves no evaluation folds")

    by_fold: dict = {}
    for cell in gold:
        fold = fold_of[cell.table_id]
        if fold >= dev_folds:
            by_fold.setdefault(fold - dev_folds, []).append(cell)

    sizes = list(range(step, eval_folds + 1, step))
    if not sizes or sizes[-1] != eval_folds:
        sizes.append(eval_folds)

    points = []
    cumulative: list = []
    consumed = 0
    for size in sizes:
        while consumed < size:
            cumulative.extend(by_fold.get(consumed, []))
            consumed += 1
        report = evaluate_against_gold(extracted, cumulative, r_squared_mode)
        points.append({
            "n_folds": size,
            "n_tables": len({c.table_id for c in cumulative}),
            "report": report,
        })
    return points


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def render_eval_text(report: EvalReport, failure_rates: Optional[dict] = None) -> str:
    """Human-readable metrics table mirroring the standard report layout."""
    lines = ["Performance Metrics", "=" * 46]
    if failure_rates:
        lines.append("Critical Parsing Failures")
        for source, rate in sorted(failure_rates.items()):
            lines.append(f"  {source + ' Failure (%)':<38}{rate:>8.2f}")
        lines.append("-" * 46)
    lines.append("Overall Performance Metrics")
    rows = [
        ("R^2 (True vs. Extracted) (%)", report.r_squared_pct, 1),
        ("Total Error Rate (%)", report.total_error_rate_pct, 1),
        ("  Missing Output (%)", report.missing_output_pct, 1),
        ("  Incorrect Output (%)", report.incorrect_output_pct, 1),
        ("Mean Error (Units)", report.mean_error_units, 1),
        ("Mean Abs. Error (Units)", report.mean_abs_error_units, 1),
        ("Mean Error (%)", report.mean_error_pct, 1),
        ("Mean Abs. Error (%)", report.mean_abs_error_pct, 1),
        ("Num. of Cells", float(report.n_cells), 1),
        ("Num. of Tables", float(report.n_tables), 1),
    ]
    for label, value, digits in rows:
        lines.append(f"  {label:<38}{value:>8.{digits}f}")
    if report.error_only is not None:
        eo = report.error_only
        lines.append("-" * 46)
        lines.append("Error Only Performance Metrics")
        eo_rows = [
            ("R^2 (True vs. Extracted) (%)", eo.r_squared_pct),
            ("Mean Error (Units)", eo.mean_error_units),
            ("Mean Abs. Error (Units)", eo.mean_abs_error_units),
            ("Median Error (Units)", eo.median_error_units),
            ("Median Abs. Error (Units)", eo.median_abs_error_units),
            ("Mean Error (%)", eo.mean_error_pct),
            ("Mean Abs. Error (%)", eo.mean_abs_error_pct),
            ("Median Error (%)", eo.median_error_pct),
            ("Median Abs. Error (%)", eo.median_abs_error_pct),
            ("75th Percentile Abs. Error (%)", eo.p75_abs_error_pct),
            ("95th Percentile Abs. Error (%)", eo.p95_abs_error_pct),
            ("Num. of Cells", float(eo.n_cells)),
            ("Num. of Tables", float(eo.n_tables)),
        ]
        for label, value in eo_rows:
            lines.append(f"  {label:<38}{value:>8.1f}")
    return "\n".join(lines) + "\n"
