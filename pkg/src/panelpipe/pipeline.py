"""Stage orchestration: extract -> validate -> harmonize -> assemble ->
outliers -> evaluate -> converge -> regress -> report.

Each stage reads the previous stage's persisted artifacts from the run
directory and rewrites its own outputs deterministically, so any stage can be
rerun alone (missing prerequisites raise StageOrderError naming the stage to
run first). No artifact carries a timestamp: two runs of the same corpus,
config, and seed are byte-identical, which is asserted in the acceptance
suite. Stage wall-clock goes to the logger only.
"""

from __future__ import annotations

import csv
import logging
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Mapping, Optional

from . import dedup as dd
from . import econ
from . import extraction as ex
from . import harmonize as hz
from . import panel as pn
from . import quality as q
from .config import RunConfig
from .providers import (
    HttpProvider,
    MockProvider,
    ProviderUnavailable,
    RateLimiter,
    ResponseCache,
    RetryPolicy,
    RetryingProvider,
)
from .tables import ParseFailure, RawTable, TableProvenance, parse_raw_csv, validate_structure
from .utils import (
    atomic_write_text,
    read_json,
    read_jsonl,
    write_csv_text,
    write_json,
    write_jsonl,
)

logger = logging.getLogger(__name__)

__all__ = ["StageOrderError", "run_pipeline", "STAGES", "run_stage", "gold_store"]

STAGES = ("extract", "validate", "harmonize", "assemble", "outliers",
          "evaluate", "converge", "regress", "report")


class StageOrderError(Exception):
    def __init__(self, missing: str, needed_by: str):
        super().__init__(
            f"stage '{needed_by}' needs artifacts from stage '{missing}'; run it first"
        )
        self.missing = missing
        self.needed_by = needed_by


# ---------------------------------------------------------------------------
# Corpus loading
# ---------------------------------------------------------------------------


def load_provenance(cfg: RunConfig) -> dict:
    records = {}
    for rec in read_jsonl(cfg.provenance_path):
        prov = TableProvenance(
            document_id=rec["document_id"], state=rec["state"], year=int(rec["year"]),
            page=int(rec["page"]), ingestion_number=int(rec["ingestion_number"]),
            county=rec.get("county"),
        )
        records[prov.table_id] = prov
    return records


def load_refdata(cfg: RunConfig):
    categories, aliases = hz.load_field_reference(
        cfg.refdata_dir / "field_categories.csv",
        cfg.refdata_dir / "field_aliases.csv",
    )
    mapper = hz.FieldMapper(categories, aliases, threshold=cfg.fuzzy_threshold)
    refs = {}
    for path in sorted((cfg.refdata_dir / "counties").glob("*.csv")):
        state = path.stem
        refs[state] = hz.load_county_ref(
            state, cfg.refdata_dir / "counties", cfg.refdata_dir / "specials"
        )
    return mapper, refs


def load_population(cfg: RunConfig) -> dict:
    decennial: dict = defaultdict(dict)
    with open(cfg.population_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            decennial[row["county_id"]][int(row["year"])] = float(row["population"])
    return {cid: pn.PopulationSeries(cid, dict(series))
            for cid, series in decennial.items()}


def load_state_totals(cfg: RunConfig) -> pn.StateTotalsRef:
    totals = {}
    with open(cfg.state_totals_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            totals[(row["state"], int(row["year"]))] = float(row["total_vehicles"])
    return pn.StateTotalsRef(totals=totals)


def load_prices(cfg: RunConfig) -> dict:
    raw = read_json(cfg.prices_path)
    return {model: (float(rates[0]), float(rates[1])) for model, rates in raw.items()}


def gold_store(cfg: RunConfig) -> dict:
    """The gold dataset: base drafts overlaid by the append-only corrections."""
    cells: dict = {}
    base = cfg.gold_dir / "base.jsonl"
    if base.exists():
        for rec in read_jsonl(base):
            cells[(rec["table_id"], rec["county_id"], rec["field"])] = rec["value"]
    corrections = cfg.gold_dir / "corrections.jsonl"
    if corrections.exists():
        for rec in read_jsonl(corrections):
            cells[(rec["table_id"], rec["county_id"], rec["field"])] = rec["value"]
    return cells


def gold_cells_list(cfg: RunConfig) -> list:
    return [q.GoldCell(tid, county, fieldname, value)
            for (tid, county, fieldname), value in sorted(gold_store(cfg).items())]


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


def _manifest_path(cfg: RunConfig) -> Path:
    return cfg.output_dir / "manifest.json"


def _update_manifest(cfg: RunConfig, stage: str, counts: dict,
                     tables: Optional[dict] = None):
    path = _manifest_path(cfg)
    manifest = read_json(path) if path.exists() else {}
    manifest["config_hash"] = cfg.config_hash
    manifest.setdefault("stages", {})[stage] = counts
    if tables:
        merged = manifest.setdefault("tables", {})
        for table_id, status in tables.items():
            merged.setdefault(table_id, {}).update(status)
    write_json(path, manifest)


def _require(cfg: RunConfig, artifact: str, produced_by: str, needed_by: str) -> Path:
    path = cfg.output_dir / artifact
    if not path.exists():
        raise StageOrderError(produced_by, needed_by)
    return path


# ---------------------------------------------------------------------------
# extract
# ---------------------------------------------------------------------------


def _build_provider(cfg: RunConfig, model_id: str):
    if cfg.provider_kind == "mock":
        inner = MockProvider(cfg.fixtures_dir)
    elif cfg.provider_kind == "http":
        endpoint = cfg.provider_endpoints.get(model_id)
        if not endpoint:
            raise ValueError(f"no endpoint configured for model {model_id!r}")
        inner = HttpProvider(endpoint)
    else:
        raise ValueError(f"unknown provider kind {cfg.provider_kind!r}")
    policy = RetryPolicy(attempts=cfg.retry.attempts,
                         backoff_base=cfg.retry.backoff_base,
                         backoff_factor=cfg.retry.backoff_factor,
                         jitter=cfg.retry.jitter)
    limiter = (RateLimiter(cfg.retry.rate_per_second)
               if cfg.retry.rate_per_second > 0 else None)
    return RetryingProvider(inner, policy, limiter, seed=cfg.seed)


def _raw_path(cfg: RunConfig, table_id: str, model_id: str) -> Path:
    return cfg.output_dir / "raw" / f"{table_id}__{model_id}.csv"


def stage_extract(cfg: RunConfig) -> dict:
    provenance = load_provenance(cfg)
    cache = ResponseCache(cfg.resolved_cache_dir)
    template = ex.PromptTemplate()
    clients = {m: ex.ExtractionClient(_build_provider(cfg, m), cache)
               for m in cfg.models}

    by_document: dict = defaultdict(list)
    for table_id, prov in provenance.items():
        by_document[prov.document_id].append(prov)
    for pages in by_document.values():
        pages.sort(key=lambda p: p.page)

    index = []
    statuses: dict = defaultdict(dict)

    def process_document(doc_pages, model_id):
        rows = []
        carried = None
        for prov in doc_pages:
            image = (cfg.images_dir / f"{prov.table_id}.png").read_bytes()
            prompt = ex.render_prompt(template, prov.state, carried)
            request = ex.ExtractionRequest(
                model_id=model_id, prompt=prompt, image=image,
                media_type="image/png", provenance=prov,
                carried_headers=carried, max_output=cfg.max_output_tokens,
            )
            client = clients[model_id]
            response = client.fetch(request)
            try:
                table = parse_raw_csv(response.text, prov.with_model(model_id))
                carried = table.header_rows
                status = "extracted"
                reason = ""
            except ParseFailure as exc:
                carried = None
                status = "unusable"
                reason = exc.reason
            atomic_write_text(_raw_path(cfg, prov.table_id, model_id), response.text)
            rows.append({
                "table_id": prov.table_id,
                "model_id": model_id,
                "status": status,
                "reason": reason,
                "input_tokens": response.input_tokens,
                "output_tokens": response.output_tokens,
            })
        return rows

    tasks = [(pages, model) for _, pages in sorted(by_document.items())
             for model in cfg.models]
    started = time.perf_counter()
    try:
        if cfg.max_workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.max_workers) as pool:
                results = list(pool.map(lambda t: process_document(*t), tasks))
        else:
            results = [process_document(*t) for t in tasks]
    except ProviderUnavailable:
        _update_manifest(cfg, "extract", {
            "input": len(provenance) * len(cfg.models), "output": 0,
            "excluded": len(provenance) * len(cfg.models), "aborted": True,
        })
        raise
    for rows in results:
        index.extend(rows)
        for row in rows:
            statuses[row["table_id"]][row["model_id"]] = row["status"]

    index.sort(key=lambda r: (r["table_id"], r["model_id"]))
    write_jsonl(cfg.output_dir / "raw_index.jsonl", index,
                cfg.config_hash, "extract")

    # canonical usage order: float sums must not depend on thread interleaving
    usage = sorted(
        (u for m in clients for u in clients[m].usage),
        key=lambda u: (u.model_id, u.input_tokens, u.output_tokens),
    )
    report = ex.estimate_cost(usage, load_prices(cfg), n_tables=len(provenance),
                              batch_mode=cfg.batch_mode)
    write_json(cfg.output_dir / "cost_report.json", report.to_record(), cfg.config_hash)

    extracted = sum(1 for r in index if r["status"] == "extracted")
    counts = {
        "input": len(index),
        "output": extracted,
        "excluded": len(index) - extracted,
    }
    # cache traffic varies between cold and warm runs, so it stays out of the
    # manifest to keep rerun artifacts byte-identical
    logger.info("extract: %d/%d lanes in %.2fs (cache %d hits / %d misses)",
                extracted, len(index), time.perf_counter() - started,
                cache.hits, cache.misses)
    _update_manifest(cfg, "extract", counts, statuses)
    return counts


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------


def _load_raw_table(cfg: RunConfig, prov: TableProvenance, model_id: str) -> RawTable:
    text = _raw_path(cfg, prov.table_id, model_id).read_text(encoding="utf-8")
    return parse_raw_csv(text, prov.with_model(model_id))


def stage_validate(cfg: RunConfig) -> dict:
    _require(cfg, "raw_index.jsonl", "extract", "validate")
    provenance = load_provenance(cfg)
    index = list(read_jsonl(cfg.output_dir / "raw_index.jsonl"))

    records = []
    outcomes: dict = defaultdict(list)
    statuses: dict = defaultdict(dict)

    for row in index:
        if row["status"] != "extracted":
            outcomes[row["model_id"]].append(True)  # unusable counts as failed
            records.append({
                "table_id": row["table_id"], "source": row["model_id"],
                "is_critical_failure": True,
                "failed_conditions": ["unusable_response"],
                "valid_column_indices": [],
            })
            continue
        prov = provenance[row["table_id"]]
        report = validate_structure(_load_raw_table(cfg, prov, row["model_id"]))
        outcomes[row["model_id"]].append(report.is_critical_failure)
        rec = {"table_id": row["table_id"], "source": row["model_id"]}
        rec.update(report.to_record())
        records.append(rec)
        statuses[row["table_id"]][f"valid_{row['model_id']}"] = \
            not report.is_critical_failure

    for table_id in sorted(provenance):
        path = cfg.baseline_dir / f"{table_id}.csv"
        if not path.exists():
            continue
        prov = provenance[table_id].with_model("baseline")
        try:
            report = validate_structure(
                parse_raw_csv(path.read_text(encoding="utf-8"), prov)
            )
            failed = report.is_critical_failure
            rec = {"table_id": table_id, "source": "baseline"}
            rec.update(report.to_record())
        except ParseFailure:
            failed = True
            rec = {"table_id": table_id, "source": "baseline",
                   "is_critical_failure": True,
                   "failed_conditions": ["unparsable"],
                   "valid_column_indices": []}
        outcomes["baseline"].append(failed)
        records.append(rec)

    records.sort(key=lambda r: (r["source"], r["table_id"]))
    write_jsonl(cfg.output_dir / "structural.jsonl", records,
                cfg.config_hash, "validate")
    rates = q.critical_failure_rate(outcomes)
    write_json(cfg.output_dir / "failure_rates.json",
               {"rates": rates, "tables": {s: len(v) for s, v in outcomes.items()}},
               cfg.config_hash)

    model_records = [r for r in records if r["source"] != "baseline"]
    ok = sum(1 for r in model_records if not r["is_critical_failure"])
    counts = {"input": len(model_records), "output": ok,
              "excluded": len(model_records) - ok}
    _update_manifest(cfg, "validate", counts, statuses)
    return counts


# ---------------------------------------------------------------------------
# harmonize
# ---------------------------------------------------------------------------


def _usable_lanes(cfg: RunConfig) -> list:
    structural = list(read_jsonl(cfg.output_dir / "structural.jsonl"))
    return sorted(
        (r["table_id"], r["source"]) for r in structural
        if r["source"] != "baseline" and not r["is_critical_failure"]
    )


def stage_harmonize(cfg: RunConfig) -> dict:
    _require(cfg, "structural.jsonl", "validate", "harmonize")
    provenance = load_provenance(cfg)
    mapper, refs = load_refdata(cfg)

    records = []
    for table_id, model_id in _usable_lanes(cfg):
        prov = provenance[table_id]
        ref = refs[prov.state]
        raw = _load_raw_table(cfg, prov, model_id)
        layout = hz.classify_layout(raw, ref, cfg.fuzzy_threshold)
        field_map = hz.harmonize_fields(raw.column_names, mapper)
        if layout == hz.COUNTY_SORTED:
            raw_names = sorted({r[0].raw for r in raw.data_rows
                                if r and r[0].kind == "text"})
        else:
            raw_names = [prov.county] if prov.county else []
        county_map = hz.standardize_counties(raw_names, ref, cfg.fuzzy_threshold)
        ordered_categories = [
            field_map[name].canonical
            for name in raw.column_names[1:]
            if name in field_map and field_map[name].mapped
        ]
        records.append({
            "table_id": table_id,
            "model_id": model_id,
            "layout": layout,
            "vintage_id": hz.header_signature(prov.state, ordered_categories),
            "fields": {h: d.to_record() for h, d in sorted(field_map.items())},
            "counties": {r: d.to_record() for r, d in sorted(county_map.items())},
            "unmapped_fields": sum(1 for d in field_map.values() if not d.mapped),
            "unmapped_counties": sum(1 for d in county_map.values() if not d.mapped),
        })

    records.sort(key=lambda r: (r["table_id"], r["model_id"]))
    write_jsonl(cfg.output_dir / "harmonized.jsonl", records,
                cfg.config_hash, "harmonize")
    counts = {"input": len(records), "output": len(records), "excluded": 0}
    _update_manifest(cfg, "harmonize", counts)
    return counts


# ---------------------------------------------------------------------------
# assemble
# ---------------------------------------------------------------------------


def _aligned_to_record(table: pn.AlignedTable) -> dict:
    return {
        "table_id": table.table_id,
        "model_id": table.provenance.model_id,
        "vintage_id": table.provenance.vintage_id,
        "layout": table.layout,
        "rows": {
            f"{county}|{year}": {
                fieldname: value for fieldname, value in sorted(row.items())
            }
            for (county, year), row in sorted(table.rows.items())
        },
        "model_values": {
            f"{county}|{year}": {
                fieldname: dict(sorted(models.items()))
                for fieldname, models in sorted(cells.items())
            }
            for (county, year), cells in sorted(table.model_values.items())
        },
        "stats": table.stats.to_record(),
    }


def _record_to_aligned(rec: dict, prov: TableProvenance) -> pn.AlignedTable:
    rows = {}
    model_values = {}
    for key, row in rec["rows"].items():
        county, year = key.rsplit("|", 1)
        rows[(county, int(year))] = dict(row)
    for key, cells in rec["model_values"].items():
        county, year = key.rsplit("|", 1)
        model_values[(county, int(year))] = {f: dict(m) for f, m in cells.items()}
    return pn.AlignedTable(
        provenance=prov.with_model(rec["model_id"]).with_vintage(rec["vintage_id"]),
        rows=rows, model_values=model_values, layout=rec["layout"],
    )


def _decisions_from_records(records: Mapping[str, dict]) -> dict:
    return {
        raw: hz.MappingDecision(raw=rec["raw"], canonical=rec["canonical"],
                                method=rec["method"], score=rec["score"])
        for raw, rec in records.items()
    }


def stage_assemble(cfg: RunConfig) -> dict:
    _require(cfg, "harmonized.jsonl", "harmonize", "assemble")
    provenance = load_provenance(cfg)
    _, refs = load_refdata(cfg)
    population = load_population(cfg)
    totals_ref = load_state_totals(cfg)
    gold_keys = set(gold_store(cfg))

    harmonized = {(r["table_id"], r["model_id"]): r
                  for r in read_jsonl(cfg.output_dir / "harmonized.jsonl")}

    aligned_records = []
    per_table: dict = defaultdict(dict)
    alignment_empty = 0
    statuses: dict = defaultdict(dict)
    for (table_id, model_id), rec in sorted(harmonized.items()):
        prov = provenance[table_id].with_model(model_id).with_vintage(rec["vintage_id"])
        raw = _load_raw_table(cfg, provenance[table_id], model_id)
        try:
            aligned = pn.align_table(
                raw,
                _decisions_from_records(rec["fields"]),
                _decisions_from_records(rec["counties"]),
                rec["layout"],
                refs[prov.state],
            )
        except pn.AlignmentEmpty:
            alignment_empty += 1
            statuses[table_id][f"aligned_{model_id}"] = False
            continue
        aligned = pn.AlignedTable(
            provenance=prov, rows=aligned.rows, model_values=aligned.model_values,
            layout=aligned.layout, stats=aligned.stats,
        )
        per_table[table_id][model_id] = aligned
        aligned_records.append(_aligned_to_record(aligned))
        statuses[table_id][f"aligned_{model_id}"] = True
    write_jsonl(cfg.output_dir / "aligned.jsonl", aligned_records,
                cfg.config_hash, "assemble")

    # cell-wise ensemble per table
    ensembled = {}
    for table_id in sorted(per_table):
        ensembled[table_id] = ex.ensemble_tables(per_table[table_id])
    write_jsonl(cfg.output_dir / "ensembled.jsonl",
                [_aligned_to_record(t) for t in ensembled.values()],
                cfg.config_hash, "assemble")

    readings = []
    for table_id in sorted(ensembled):
        state = provenance[table_id].state
        readings.extend(pn.observations_from_aligned(
            ensembled[table_id], state, gold_keys
        ))
    write_jsonl(cfg.output_dir / "readings.jsonl",
                [o.to_record() for o in readings], cfg.config_hash, "assemble")

    observations, dedup_report = assemble_panel(
        readings, ensembled.values(), refs, population, totals_ref,
        infeasible_ratio=cfg.thresholds.population_ratio,
    )
    write_jsonl(cfg.output_dir / "panel.jsonl",
                [o.to_record() for o in observations], cfg.config_hash, "assemble")
    write_csv_text(
        cfg.output_dir / "panel.csv",
        "state,county_id,year,field,value,per_capita,log_rate,document_id,page,model_id,vintage_id",
        [
            f"{o.state},{o.county_id},{o.year},{o.field},{o.value:g},"
            f"{'' if o.per_capita is None else format(o.per_capita, '.10g')},"
            f"{'' if o.log_rate is None else format(o.log_rate, '.10g')},"
            f"{o.provenance.document_id},{o.provenance.page},"
            f"{o.provenance.model_id},{o.provenance.vintage_id}"
            for o in observations
        ],
        cfg.config_hash, "assemble",
    )
    write_json(cfg.output_dir / "dedup_report.json", dedup_report, cfg.config_hash)

    counts = {
        "input": len(harmonized),
        "output": len(aligned_records),
        "excluded": alignment_empty,
        "readings": len(readings),
        "panel_observations": len(observations),
    }
    _update_manifest(cfg, "assemble", counts, statuses)
    return counts


def assemble_panel(readings, ensembled_tables, refs, population, totals_ref,
                   infeasible_ratio: float = 2.0):
    """Group readings, drop infeasible rates, resolve duplicates, join rates."""
    coverage: dict = {}
    table_totals: dict = defaultdict(float)
    vintage_docs: dict = defaultdict(set)
    for table in ensembled_tables:
        prov = table.provenance
        counties = {county for county, _ in table.rows}
        ref = refs.get(prov.state)
        required = {i for _, i in ref.entries} if ref else set()
        if required and required <= counties:
            coverage[prov.source_key] = True
        vintage_docs[prov.vintage_id].add(prov.document_id)

    for obs in readings:
        if obs.field == pn.TOTAL_VEHICLES and obs.provenance.source_key in coverage:
            table_totals[(obs.provenance.source_key, obs.year)] += obs.value

    state_total_error = {}
    by_source_state: dict = {}
    for obs in readings:
        by_source_state[obs.provenance.source_key] = (obs.state, obs.year)
    for source_key, (state, year) in by_source_state.items():
        if source_key not in coverage:
            continue
        ref_total = totals_ref.get(state, year)
        if ref_total is None:
            continue
        state_total_error[source_key] = abs(
            table_totals.get((source_key, year), 0.0) - ref_total
        )

    state_rate = {}
    state_pop: dict = defaultdict(float)
    years = sorted({obs.year for obs in readings})
    for state, ref in refs.items():
        for year in years:
            total_pop = 0.0
            for _, cid in ref.entries:
                series = population.get(cid)
                pop = series.interpolated(year) if series else None
                if pop:
                    total_pop += pop
            ref_total = totals_ref.get(state, year)
            if total_pop > 0 and ref_total is not None:
                state_rate[(state, year)] = ref_total / total_pop

    def pop_lookup(county_id, year):
        series = population.get(county_id)
        return series.interpolated(year) if series else None

    context = dd.DedupContext(
        vintage_counts={v: len(docs) for v, docs in vintage_docs.items()},
        full_coverage=frozenset(coverage),
        state_total_error=state_total_error,
        state_rate=state_rate,
        population=pop_lookup,
    )

    groups: dict = defaultdict(list)
    for obs in readings:
        groups[obs.key].append(obs)

    survivors = []
    n_duplicates = 0
    infeasible_dropped = 0
    emptied_keys = 0
    for key in sorted(groups):
        group = groups[key]
        feasible = []
        for obs in group:
            pop = pop_lookup(obs.county_id, obs.year)
            if pop and obs.value / pop > infeasible_ratio:
                infeasible_dropped += 1
            else:
                feasible.append(obs)
        if not feasible:
            emptied_keys += 1
            continue
        if len(feasible) > 1:
            n_duplicates += 1
        survivors.append(dd.resolve_duplicates(feasible, context))

    enriched, excluded = pn.join_population(survivors, population)
    enriched.sort(key=lambda o: o.key)
    report = {
        "readings": len(readings),
        "keys": len(groups),
        "duplicate_keys": n_duplicates,
        "infeasible_dropped": infeasible_dropped,
        "keys_emptied_by_infeasible": emptied_keys,
        "no_population_excluded": len(excluded),
        "panel_observations": len(enriched),
        "vintage_counts": {v: len(d) for v, d in sorted(vintage_docs.items())},
    }
    return enriched, report


# ---------------------------------------------------------------------------
# outliers
# ---------------------------------------------------------------------------


def _panel_from_jsonl(cfg: RunConfig, name: str) -> list:
    provenance = load_provenance(cfg)
    out = []
    for rec in read_jsonl(cfg.output_dir / name):
        table_id = f"{rec['document_id']}_p{rec['page']}"
        prov = provenance[table_id].with_model(rec["model_id"]) \
            .with_vintage(rec["vintage_id"])
        out.append(pn.PanelObservation(
            county_id=rec["county_id"], state=rec["state"], year=rec["year"],
            field=rec["field"], value=rec["value"], provenance=prov,
            model_support=frozenset(rec["model_support"]),
            gold_available=rec["gold_available"],
            per_capita=rec.get("per_capita"), log_rate=rec.get("log_rate"),
            flags=tuple(rec.get("flags", ())),
        ))
    return out


def stage_outliers(cfg: RunConfig) -> dict:
    _require(cfg, "panel.jsonl", "assemble", "outliers")
    panel = _panel_from_jsonl(cfg, "panel.jsonl")
    readings = _panel_from_jsonl(cfg, "readings.jsonl")
    population = load_population(cfg)
    thresholds = cfg.thresholds

    flags = []
    flags += q.detect_population_outliers(panel, population, thresholds)
    flags += q.detect_timeseries_outliers(panel, thresholds)
    flags += q.detect_crossfield_outliers(panel, thresholds)
    flags += q.detect_duplicate_outliers(readings, thresholds)
    flags.sort(key=lambda f: f.flag_id)
    write_jsonl(cfg.output_dir / "flags.jsonl", [f.to_record() for f in flags],
                cfg.config_hash, "outliers")

    flagged_keys = {f.key for f in flags}
    flagged = sum(1 for o in panel if (o.county_id, o.year, o.field) in flagged_keys)
    counts = {"input": len(panel), "output": len(panel) - flagged,
              "excluded": flagged, "flags": len(flags)}
    _update_manifest(cfg, "outliers", counts)
    return counts


# ---------------------------------------------------------------------------
# evaluate / converge
# ---------------------------------------------------------------------------


def _load_ensembled(cfg: RunConfig) -> list:
    provenance = load_provenance(cfg)
    tables = []
    for rec in read_jsonl(cfg.output_dir / "ensembled.jsonl"):
        tables.append(_record_to_aligned(rec, provenance[rec["table_id"]]))
    return tables


def _load_aligned_by_model(cfg: RunConfig) -> dict:
    provenance = load_provenance(cfg)
    by_model: dict = defaultdict(list)
    for rec in read_jsonl(cfg.output_dir / "aligned.jsonl"):
        by_model[rec["model_id"]].append(
            _record_to_aligned(rec, provenance[rec["table_id"]])
        )
    return by_model


def stage_evaluate(cfg: RunConfig) -> dict:
    _require(cfg, "ensembled.jsonl", "assemble", "evaluate")
    gold = gold_cells_list(cfg)
    if not gold:
        raise StageOrderError("gold store (corpus gold/base.jsonl)", "evaluate")
    provenance = load_provenance(cfg)
    extracted = q.flatten_aligned(_load_ensembled(cfg))
    report = q.evaluate_against_gold(extracted, gold, cfg.r_squared_mode)

    per_model = {}
    for model_id, tables in sorted(_load_aligned_by_model(cfg).items()):
        try:
            per_model[model_id] = q.evaluate_against_gold(
                q.flatten_aligned(tables), gold, cfg.r_squared_mode
            ).to_record()
        except q.EmptyEvaluation:
            per_model[model_id] = None

    rates = read_json(cfg.output_dir / "failure_rates.json")["rates"] \
        if (cfg.output_dir / "failure_rates.json").exists() else None
    write_json(cfg.output_dir / "eval.json",
               {"ensemble": report.to_record(), "per_model": per_model},
               cfg.config_hash)
    atomic_write_text(cfg.output_dir / "eval.txt",
                      q.render_eval_text(report, rates))

    table_meta = {tid: (p.state, p.year) for tid, p in provenance.items()}
    for group_by in ("decade", "state"):
        grouped = q.breakdown(extracted, gold, table_meta, group_by,
                              cfg.r_squared_mode)
        rows = []
        for key, rep in sorted(grouped.items()):
            med = rep.error_only.median_abs_error_pct if rep.error_only else 0.0
            rows.append(
                f"{key},{rep.r_squared_pct:.6g},{rep.total_error_rate_pct:.6g},"
                f"{rep.missing_output_pct:.6g},{rep.incorrect_output_pct:.6g},"
                f"{med:.6g},{rep.n_cells}"
            )
        write_csv_text(
            cfg.output_dir / f"breakdown_{group_by}.csv",
            f"{group_by},r_squared_pct,total_error_rate_pct,missing_pct,"
            "incorrect_pct,median_abs_error_pct,n_cells",
            rows, cfg.config_hash, "evaluate",
        )

    correct = report.n_cells - report.n_missing - report.n_incorrect
    counts = {"input": report.n_cells, "output": correct,
              "excluded": report.n_missing + report.n_incorrect}
    _update_manifest(cfg, "evaluate", counts)
    return counts


def stage_converge(cfg: RunConfig) -> dict:
    _require(cfg, "ensembled.jsonl", "assemble", "converge")
    gold = gold_cells_list(cfg)
    extracted = q.flatten_aligned(_load_ensembled(cfg))
    points = q.convergence_analysis(
        extracted, gold, folds=cfg.folds, step=cfg.fold_step,
        split=cfg.fold_split, seed=cfg.seed, r_squared_mode=cfg.r_squared_mode,
    )
    rows = []
    for point in points:
        rep = point["report"]
        rows.append(
            f"{point['n_folds']},{point['n_tables']},{rep.n_cells},"
            f"{rep.r_squared_pct!r},{rep.total_error_rate_pct!r},"
            f"{rep.missing_output_pct!r},{rep.incorrect_output_pct!r},"
            f"{rep.mean_abs_error_pct!r}"
        )
    write_csv_text(
        cfg.output_dir / "convergence.csv",
        "n_folds,n_tables,n_cells,r_squared_pct,total_error_rate_pct,"
        "missing_pct,incorrect_pct,mean_abs_error_pct",
        rows, cfg.config_hash, "converge",
    )
    counts = {"input": len(points), "output": len(points), "excluded": 0,
              "gold_cells": len(gold)}
    _update_manifest(cfg, "converge", counts)
    return counts


# ---------------------------------------------------------------------------
# regress
# ---------------------------------------------------------------------------


def _gold_aligned_tables(cfg: RunConfig) -> list:
    """Materialize the gold dataset as aligned tables for panel assembly."""
    provenance = load_provenance(cfg)
    vintage_by_table: dict = {}
    if (cfg.output_dir / "harmonized.jsonl").exists():
        for rec in read_jsonl(cfg.output_dir / "harmonized.jsonl"):
            vintage_by_table.setdefault(rec["table_id"], rec["vintage_id"])
    by_table: dict = defaultdict(dict)
    for (table_id, county_id, fieldname), value in sorted(gold_store(cfg).items()):
        by_table[table_id][(county_id, fieldname)] = value
    tables = []
    for table_id in sorted(by_table):
        prov = provenance[table_id].with_model("gold") \
            .with_vintage(vintage_by_table.get(table_id, f"{provenance[table_id].state}-gold"))
        rows: dict = defaultdict(dict)
        model_values: dict = defaultdict(dict)
        for (county_id, fieldname), value in by_table[table_id].items():
            key = (county_id, prov.year)
            rows[key][fieldname] = value
            if value is not None:
                model_values[key][fieldname] = {"gold": float(value)}
        tables.append(pn.AlignedTable(
            provenance=prov, rows=dict(rows), model_values=dict(model_values),
        ))
    return tables


def _assemble_lane(cfg: RunConfig, tables, gold_keys) -> list:
    _, refs = load_refdata(cfg)
    population = load_population(cfg)
    totals_ref = load_state_totals(cfg)
    readings = []
    for table in sorted(tables, key=lambda t: t.table_id):
        readings.extend(pn.observations_from_aligned(
            table, table.provenance.state, gold_keys
        ))
    observations, _ = assemble_panel(
        readings, tables, refs, population, totals_ref,
        infeasible_ratio=cfg.thresholds.population_ratio,
    )
    return observations


def stage_regress(cfg: RunConfig) -> dict:
    _require(cfg, "panel.jsonl", "assemble", "regress")
    panel_llm = _panel_from_jsonl(cfg, "panel.jsonl")
    gold_keys = set(gold_store(cfg))
    panel_gold = _assemble_lane(cfg, _gold_aligned_tables(cfg), gold_keys)
    population = load_population(cfg)

    panel_a = []
    panel_b = []
    skipped = []
    for tau in cfg.persistence_years:
        try:
            panel_a.append(econ.persistence_spec(panel_llm, panel_gold, tau))
        except econ.SampleError as exc:
            skipped.append({"spec": "persistence", "period": f"{tau - 10}-{tau}",
                            "reason": str(exc)})
    for start in cfg.popgrowth_decades:
        try:
            panel_b.append(econ.popgrowth_spec(
                panel_llm, panel_gold, start, population,
                max_initial_population=cfg.max_initial_population,
            ))
        except econ.SampleError as exc:
            skipped.append({"spec": "popgrowth", "period": f"{start}-{start + 10}",
                            "reason": str(exc)})

    write_json(cfg.output_dir / "regression.json", {
        "persistence": [p.to_record() for p in panel_a],
        "popgrowth": [p.to_record() for p in panel_b],
        "skipped": skipped,
    }, cfg.config_hash)
    atomic_write_text(cfg.output_dir / "regression.txt",
                      econ.render_results_table(panel_a, panel_b))
    counts = {"input": len(cfg.persistence_years) + len(cfg.popgrowth_decades),
              "output": len(panel_a) + len(panel_b), "excluded": len(skipped)}
    _update_manifest(cfg, "regress", counts)
    return counts


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def stage_report(cfg: RunConfig) -> dict:
    _require(cfg, "eval.txt", "evaluate", "report")
    sections = [f"# Run report\n\nconfig_hash: {cfg.config_hash}\n"]
    rates_path = cfg.output_dir / "failure_rates.json"
    if rates_path.exists():
        rates = read_json(rates_path)["rates"]
        sections.append("## Critical parsing failures\n")
        sections.append("| source | failure % |\n|---|---|")
        for source, rate in sorted(rates.items()):
            sections.append(f"| {source} | {rate:.2f} |")
        sections.append("")
    sections.append("## Gold-standard evaluation\n")
    sections.append("```")
    sections.append((cfg.output_dir / "eval.txt").read_text(encoding="utf-8").rstrip())
    sections.append("```\n")
    cost_path = cfg.output_dir / "cost_report.json"
    if cost_path.exists():
        cost = read_json(cost_path)
        sections.append("## Cost\n")
        sections.append(
            f"total ${cost['total']:.4f}, per table ${cost['per_table_mean']:.4f}, "
            f"input share {cost['input_share']:.2f}, "
            f"batch mode {'on' if cost['batch_mode'] else 'off'}\n"
        )
    flags_path = cfg.output_dir / "flags.jsonl"
    if flags_path.exists():
        by_kind: dict = defaultdict(int)
        for rec in read_jsonl(flags_path):
            by_kind[rec["kind"]] += 1
        sections.append("## Outlier flags\n")
        sections.append("| kind | count |\n|---|---|")
        for kind in ("population", "timeseries", "crossfield", "duplicate"):
            sections.append(f"| {kind} | {by_kind.get(kind, 0)} |")
        sections.append("")
    regression_path = cfg.output_dir / "regression.txt"
    if regression_path.exists():
        sections.append("## Equivalence regressions\n")
        sections.append("```")
        sections.append(regression_path.read_text(encoding="utf-8").rstrip())
        sections.append("```\n")
    atomic_write_text(cfg.output_dir / "report.md", "\n".join(sections) + "\n")
    counts = {"input": 1, "output": 1, "excluded": 0}
    _update_manifest(cfg, "report", counts)
    return counts


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


_STAGE_FUNCS = {
    "extract": stage_extract,
    "validate": stage_validate,
    "harmonize": stage_harmonize,
    "assemble": stage_assemble,
    "outliers": stage_outliers,
    "evaluate": stage_evaluate,
    "converge": stage_converge,
    "regress": stage_regress,
    "report": stage_report,
}


def run_stage(cfg: RunConfig, stage: str) -> dict:
    if stage not in _STAGE_FUNCS:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    counts = _STAGE_FUNCS[stage](cfg)
    logger.info("stage %s finished in %.2fs: %s", stage,
                time.perf_counter() - started, counts)
    return counts


def _validate_config(cfg: RunConfig):
    problems = []
    for label, path in (
        ("corpus images", cfg.images_dir),
        ("provenance sidecar", cfg.provenance_path),
        ("reference data", cfg.refdata_dir),
        ("price table", cfg.prices_path),
        ("population fixture", cfg.population_path),
        ("state totals fixture", cfg.state_totals_path),
    ):
        if not Path(path).exists():
            problems.append(f"{label} missing at {path}")
    if cfg.provider_kind == "http":
        for model in cfg.models:
            if model not in cfg.provider_endpoints:
                problems.append(f"no endpoint for model {model}")
    if problems:
        raise ValueError("config invalid: " + "; ".join(problems))


def run_pipeline(cfg: RunConfig) -> dict:
    """Run every stage in order; fail fast on config problems."""
    _validate_config(cfg)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    for stage in STAGES:
        run_stage(cfg, stage)
    return read_json(_manifest_path(cfg))
