"""Synthetic corpus generation.

Builds a self-contained corpus directory the whole pipeline can run against
offline: table images (tiny PNGs whose bytes key the mock provider), mock
response fixtures for two models with planted transcription errors, a
legacy-OCR baseline lane with layout failures, reference data, population and
state-total fixtures, a gold store, prices, and a ready-to-run config file.

Everything derives from one seed. The generator also hands back the truth it
planted so tests can assert against it without re-deriving anything.
"""

from __future__ import annotations

import csv
import json
import random
import struct
import zlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from .providers import MockProvider, ProviderResponse
from .quality import GoldCell
from .samples import MICHIGAN_BASELINE_CSV
from .utils import atomic_write_text, dumps_stable

__all__ = [
    "CorpusSpec",
    "PlantedTable",
    "generate_corpus",
    "validator_corpus",
    "ValidatorCase",
    "synthetic_eval_fixture",
    "make_png",
]

MODELS = ("model-a", "model-b")

MI_COUNTIES = [
    "Alcona", "Alger", "Allegan", "Alpena", "Antrim", "Arenac", "Baraga",
    "Barry", "Bay", "Benzie", "Berrien", "Branch", "Calhoun", "Cass",
    "Charlevoix", "Cheboygan", "Chippewa", "Clare", "Clinton", "Crawford",
]
IL_COUNTIES = [
    "Cook", "DuPage", "Kane", "Lake", "McHenry", "Peoria", "Saint Clair",
    "Sangamon", "Will", "Winnebago",
]
IL_SPECIALS = ["Chicago", "Cook Excluding Chicago"]

# Layout vintages: header text in column order, with the harmonized fields.
MI_HEADER_A = ["COUNTIES", "Passenger Cars", "Commercial Cars", "Motor Cycles", "Trailers"]
MI_FIELDS_A = ["Automobiles", "Trucks", "Motorcycles", "Trailers"]
MI_HEADER_B = ["COUNTIES", "Total", "Cars", "Motor Trucks"]
MI_FIELDS_B = ["Total Vehicles", "Automobiles", "Trucks"]
IL_HEADER_A = ["COUNTY", "Automobiles", "Trucks", "Total Vehicles"]
IL_FIELDS_A = ["Automobiles", "Trucks", "Total Vehicles"]

TOKENS = {"model-a": (1400, 3600), "model-b": (1400, 3600)}
PRICES = {"model-a": [3.0, 3.0], "model-b": [3.0, 3.0]}


def make_png(tag: str) -> bytes:
    """A minimal valid 1x1 PNG whose bytes are unique per tag."""

    def chunk(kind: bytes, payload: bytes) -> bytes:
        return (struct.pack(">I", len(payload)) + kind + payload
                + struct.pack(">I", zlib.crc32(kind + payload) & 0xFFFFFFFF))

    ihdr = chunk(b"IHDR", struct.pack(">IIBBBBB", 1, 1, 8, 0, 0, 0, 0))
    idat = chunk(b"IDAT", zlib.compress(b"\x00\xff"))
    text = chunk(b"tEXt", b"Comment\x00" + tag.encode("utf-8"))
    return b"\x89PNG\r\n\x1a\n" + ihdr + text + idat + chunk(b"IEND", b"")


@dataclass
class PlantedTable:
    table_id: str
    document_id: str
    state: str
    year: int
    page: int
    ingestion_number: int
    header: list
    fields: list
    row_names: list  # raw names printed in column 0
    county_ids: list  # canonical ids, aligned with row_names
    truth_cells: dict  # (county_id, field) -> int | None, printed cells only
    responses: dict = field(default_factory=dict)  # model -> CSV text
    county: Optional[str] = None  # only for year-sorted tables
    year_rows: Optional[list] = None  # years down column 0 when year-sorted


@dataclass
class CorpusSpec:
    out_dir: Path
    seed: int
    tables: list
    truth: dict  # (state, county_id, year, field) -> int
    population: dict  # county_id -> {census_year: pop}
    state_totals: dict  # (state, year) -> int
    county_ids: dict  # state -> {name: county_id}
    gold_base_errors: list  # keys planted wrong in the gold base
    planted_extraction_errors: dict  # (table_id, model) -> list of cell keys
    baseline_critical: dict  # table_id -> bool

    @property
    def config_path(self) -> Path:
        return self.out_dir / "config.json"


def _copy_refdata(out: Path):
    ref_root = resources.files("panelpipe") / "refdata"
    for sub in ("", "counties", "specials"):
        src = ref_root / sub if sub else ref_root
        dst = out / "refdata" / sub if sub else out / "refdata"
        dst.mkdir(parents=True, exist_ok=True)
        for entry in src.iterdir():
            if entry.is_file() and entry.name.endswith(".csv"):
                (dst / entry.name).write_text(entry.read_text(encoding="utf-8"),
                                              encoding="utf-8")


def _county_table(state: str):
    names = MI_COUNTIES if state == "MI" else IL_COUNTIES + IL_SPECIALS
    ids = {}
    if state == "MI":
        for i, name in enumerate(names):
            ids[name] = f"26{2 * i + 1:03d}"
    else:
        fips = {"Cook": "17031", "DuPage": "17043", "Kane": "17089", "Lake": "17097",
                "McHenry": "17111", "Peoria": "17143", "Saint Clair": "17163",
                "Sangamon": "17167", "Will": "17197", "Winnebago": "17201",
                "Chicago": "17031-CHI", "Cook Excluding Chicago": "17031-XCH"}
        ids = {n: fips[n] for n in names}
    return names, ids


def _truth_value(rng: random.Random, pop: float, year: int, county_factor: float):
    adoption = 0.05 + (year - 1920) * (0.35 / 40.0)
    total = max(20, int(pop * adoption * county_factor))
    autos = int(total * 0.84)
    trucks = int(total * 0.13)
    cycles = max(1, int(total * 0.02))
    trailers = max(1, int(total * 0.01))
    return autos, trucks, cycles, trailers


def _render_cell(rng: random.Random, value) -> str:
    if value is None:
        return rng.choice(["", "", "", "-", "."])
    if value >= 1000 and rng.random() < 0.35:
        return f'"{value:,d}"'
    return str(value)


def _mangle(rng: random.Random, value: int) -> int:
    kind = rng.random()
    if kind < 0.25:
        return value + rng.choice([1, 2, 5, 10, 20])
    if kind < 0.5:
        return max(0, value - rng.choice([1, 2, 5, 10, 20]))
    if kind < 0.8:
        return int(value * rng.choice([1.05, 1.12, 0.94, 0.88])) or 1
    digits = str(value)
    i = rng.randrange(len(digits))
    repl = str((int(digits[i]) + rng.randint(1, 8)) % 10)
    return int(digits[:i] + repl + digits[i + 1:] or "0")


def _truth_grid(planted: PlantedTable) -> list:
    """Row label plus printed truth values, for either layout."""
    grid = []
    ids = dict(zip(planted.row_names, planted.county_ids))
    if planted.year_rows is not None:
        cid = ids.get(planted.county)
        for row_year in planted.year_rows:
            values = [planted.truth_cells.get((cid, f, row_year))
                      for f in planted.fields]
            grid.append([str(row_year)] + values)
        return grid
    for name in planted.row_names:
        values = [planted.truth_cells.get((ids[name], f)) for f in planted.fields]
        grid.append([name] + values)
    return grid


def _baseline_render(rng: random.Random, planted: PlantedTable) -> tuple:
    """Legacy-OCR lane: roughly 40% of tables come out structurally broken."""
    broken = rng.random() < 0.40
    grid = _truth_grid(planted)
    if not broken:
        rows = [",".join(planted.header)]
        for line in grid:
            rows.append(",".join("" if c is None else str(c) for c in line))
        return "\n".join(rows) + "\n", False

    style = rng.random()
    if style < 0.2:
        return ",".join(planted.header) + "\n", True  # empty table
    rows = [",".join(planted.header)]
    names = list(planted.row_names)
    ids = dict(zip(planted.row_names, planted.county_ids))
    if style < 0.6:
        # extra cells: values spill past the header width
        for i, name in enumerate(names):
            cells = [name]
            for fieldname in planted.fields:
                value = planted.truth_cells.get((ids[name], fieldname))
                cells.append("" if value is None else str(value))
            if i % 4 == 0:
                cells.append(str(rng.randint(2, 99)))
            rows.append(",".join(cells))
        return "\n".join(rows) + "\n", True
    # merged cells in every value column, with orphan rows
    for i, name in enumerate(names):
        cells = [name if i % 5 else ""]
        for j, fieldname in enumerate(planted.fields):
            value = planted.truth_cells.get((ids[name], fieldname)) or 0
            if (i + j) % (3 + j) == 0:
                cells.append(f"{value} {rng.randint(10, 999)}")
            else:
                cells.append(str(value))
        rows.append(",".join(cells))
    return "\n".join(rows) + "\n", True


def generate_corpus(out_dir: Path, seed: int = 0,
                    years=tuple(range(1920, 1961, 5)),
                    reprint_years=(1925, 1935, 1945, 1955)) -> CorpusSpec:
    """Write a complete synthetic corpus and return what was planted."""
    rng = random.Random(seed)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "baseline").mkdir(parents=True, exist_ok=True)
    (out / "gold").mkdir(parents=True, exist_ok=True)
    _copy_refdata(out)

    truth: dict = {}
    population: dict = {}
    state_totals: dict = {}
    county_ids: dict = {}
    county_factor: dict = {}

    for state in ("MI", "IL"):
        names, ids = _county_table(state)
        county_ids[state] = ids
        for i, name in enumerate(names):
            cid = ids[name]
            county_factor[cid] = 0.7 + 0.6 * rng.random()
            base = 3000 + 2600 * i + rng.randint(0, 1500)
            growth = 1.05 + 0.05 * rng.random()
            population[cid] = {
                y: int(base * growth ** ((y - 1910) / 10.0))
                for y in range(1910, 1971, 10)
            }

    # truth panel over every (state, county, year)
    for state in ("MI", "IL"):
        names, ids = _county_table(state)
        for year in years:
            for name in names:
                cid = ids[name]
                pops = population[cid]
                lo, hi = (year // 10) * 10, (year // 10) * 10 + 10
                pop = pops[lo] + (pops[hi] - pops[lo]) * (year - lo) / 10.0
                autos, trucks, cycles, trailers = _truth_value(
                    rng, pop, year, county_factor[cid]
                )
                truth[(state, cid, year, "Automobiles")] = autos
                truth[(state, cid, year, "Trucks")] = trucks
                truth[(state, cid, year, "Motorcycles")] = cycles
                truth[(state, cid, year, "Trailers")] = trailers
                truth[(state, cid, year, "Total Vehicles")] = autos + trucks - trailers
            state_totals[(state, year)] = sum(
                truth[(state, ids[n], year, "Total Vehicles")] for n in names
            )

    # documents: one per state-year, plus reprints in a second layout
    tables: list = []
    ingestion = 0

    def plant(state, year, doc_suffix, header, fields, page=1, names_subset=None,
              county_meta=None, year_rows=None):
        nonlocal ingestion
        ingestion += 1
        names, ids = _county_table(state)
        row_names = names_subset if names_subset is not None else names
        doc = f"{state}{year}{doc_suffix}"
        table_id = f"{doc}_p{page}"
        cells = {}
        if year_rows is None:
            for name in row_names:
                cid = ids[name]
                for fieldname in fields:
                    value = truth[(state, cid, year, fieldname)]
                    # sparse printed blanks in the small MI columns
                    if state == "MI" and fieldname in ("Motorcycles", "Trailers") \
                            and rng.random() < 0.08:
                        value = None
                    cells[(cid, fieldname)] = value
        else:
            cid = ids[county_meta]
            for row_year in year_rows:
                for fieldname in fields:
                    cells[(cid, fieldname, row_year)] = truth[(state, cid, row_year, fieldname)]
        planted = PlantedTable(
            table_id=table_id, document_id=doc, state=state, year=year, page=page,
            ingestion_number=ingestion, header=header, fields=fields,
            row_names=list(row_names),
            county_ids=[ids[n] for n in row_names],
            truth_cells=cells, county=county_meta, year_rows=year_rows,
        )
        tables.append(planted)
        return planted

    for year in years:
        if year == min(years):
            # a multi-page document: counties split across two pages
            half = len(MI_COUNTIES) // 2
            plant("MI", year, "", MI_HEADER_A, MI_FIELDS_A,
                  page=1, names_subset=MI_COUNTIES[:half])
            plant("MI", year, "", MI_HEADER_A, MI_FIELDS_A,
                  page=2, names_subset=MI_COUNTIES[half:])
        else:
            plant("MI", year, "", MI_HEADER_A, MI_FIELDS_A)
        plant("IL", year, "", IL_HEADER_A, IL_FIELDS_A)
        if year in reprint_years:
            plant("MI", year, "r", MI_HEADER_B, MI_FIELDS_B)
    # one year-sorted single-county document
    plant("IL", max(years), "series", ["Year", "Automobiles", "Trucks", "Total Vehicles"],
          IL_FIELDS_A, county_meta="Cook", year_rows=list(years))

    # extraction responses with planted per-model errors
    gold_base: dict = {}
    planted_errors: dict = {}
    gold_base_errors: list = []
    error_rates = {"model-a": (0.02, 0.02), "model-b": (0.04, 0.06)}
    unusable_target = tables[3].table_id  # one unusable response for model-b

    for planted in tables:
        for (key, value) in planted.truth_cells.items():
            if planted.year_rows is None:
                gold_base[(planted.table_id, key[0], key[1])] = value
        for model in MODELS:
            err_p, miss_p = error_rates[model]
            lines = [",".join(planted.header)]
            errors = []
            if planted.year_rows is not None:
                ids = county_ids[planted.state]
                cid = ids[planted.county]
                for row_year in planted.year_rows:
                    cells = [str(row_year)]
                    for fieldname in planted.fields:
                        value = planted.truth_cells[(cid, fieldname, row_year)]
                        cells.append(_render_cell(rng, value))
                    lines.append(",".join(cells))
            else:
                for name, cid in zip(planted.row_names, planted.county_ids):
                    cells = [name]
                    for fieldname in planted.fields:
                        value = planted.truth_cells[(cid, fieldname)]
                        roll = rng.random()
                        if value is not None and roll < err_p:
                            value = _mangle(rng, value)
                            errors.append([cid, fieldname])
                        elif value is not None and roll < err_p + miss_p:
                            value = None
                            errors.append([cid, fieldname])
                        cells.append(_render_cell(rng, value))
                    lines.append(",".join(cells))
            if model == "model-b" and planted.table_id == unusable_target:
                text = "The scan is too faint to read; no table could be produced."
            else:
                text = "\n".join(lines) + "\n"
            planted.responses[model] = text
            planted_errors[(planted.table_id, model)] = errors

    # a few stale gold-draft cells: extraction is right, the draft is wrong
    clean_candidates = [
        key for key in sorted(gold_base)
        if gold_base[key] is not None
        and not any(list(k[1:]) in planted_errors[(k0, m)]
                    for m in MODELS
                    for k0, k in [(key[0], key)])
    ]
    for key in rng.sample(clean_candidates, k=3):
        gold_base[key] = gold_base[key] + 11
        gold_base_errors.append(key)

    # write corpus files ----------------------------------------------------
    baseline_critical: dict = {}
    provenance_records = []
    for planted in tables:
        image = make_png(planted.table_id + f":{seed}")
        (out / "images" / f"{planted.table_id}.png").write_bytes(image)
        for model in MODELS:
            # token counts vary per response around the 28/72 input/output
            # split, like real traffic does
            in_base, out_base = TOKENS[model]
            in_tok = in_base + (planted.ingestion_number * 7) % 90
            out_tok = out_base + len(planted.responses[model]) % 97
            fail_times = 1 if (model == "model-a" and planted is tables[0]) else 0
            MockProvider.write_fixture(
                out / "fixtures", model, image,
                ProviderResponse(planted.responses[model], in_tok, out_tok),
                fail_times=fail_times,
            )
        text, critical = _baseline_render(rng, planted)
        atomic_write_text(out / "baseline" / f"{planted.table_id}.csv", text)
        baseline_critical[planted.table_id] = critical
        record = {
            "table_id": planted.table_id,
            "document_id": planted.document_id,
            "state": planted.state,
            "year": planted.year,
            "page": planted.page,
            "ingestion_number": planted.ingestion_number,
        }
        if planted.county:
            record["county"] = planted.county
        provenance_records.append(record)

    atomic_write_text(out / "provenance.jsonl",
                      "\n".join(dumps_stable(r) for r in provenance_records) + "\n")
    atomic_write_text(out / "prices.json", json.dumps(PRICES, sort_keys=True, indent=1) + "\n")

    pop_lines = ["county_id,state,year,population"]
    for state in ("MI", "IL"):
        for name, cid in sorted(county_ids[state].items()):
            for year, pop in sorted(population[cid].items()):
                pop_lines.append(f"{cid},{state},{year},{pop}")
    atomic_write_text(out / "population.csv", "\n".join(pop_lines) + "\n")

    totals_lines = ["state,year,total_vehicles"]
    for (state, year), total in sorted(state_totals.items()):
        totals_lines.append(f"{state},{year},{total}")
    atomic_write_text(out / "state_totals.csv", "\n".join(totals_lines) + "\n")

    gold_lines = []
    for (table_id, cid, fieldname), value in sorted(gold_base.items()):
        gold_lines.append(dumps_stable({
            "table_id": table_id, "county_id": cid, "field": fieldname,
            "value": value,
        }))
    atomic_write_text(out / "gold" / "base.jsonl", "\n".join(gold_lines) + "\n")

    config = {
        "corpus_dir": ".",
        "output_dir": "run",
        "cache_dir": ".cache",
        "models": list(MODELS),
        "provider_kind": "mock",
        "retry": {"attempts": 3, "backoff_base": 0.0, "backoff_factor": 2.0,
                  "jitter": 0.0, "rate_per_second": 0.0},
        "seed": seed,
        "folds": 10,
        "fold_step": 1,
        "persistence_years": [1930, 1940, 1950, 1960],
        "popgrowth_decades": [1920, 1930, 1940, 1950],
    }
    atomic_write_text(out / "config.json", json.dumps(config, sort_keys=True, indent=1) + "\n")

    return CorpusSpec(
        out_dir=out, seed=seed, tables=tables, truth=truth,
        population=population, state_totals=state_totals, county_ids=county_ids,
        gold_base_errors=gold_base_errors,
        planted_extraction_errors=planted_errors,
        baseline_critical=baseline_critical,
    )


# ---------------------------------------------------------------------------
# Hand-labeled validator corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ValidatorCase:
    name: str
    pattern: str
    text: str
    expected_critical: bool


def _clean_table(rng: random.Random, n_rows: int, blanks: bool) -> str:
    lines = [",".join(MI_HEADER_A)]
    for i in range(n_rows):
        name = MI_COUNTIES[i % len(MI_COUNTIES)]
        values = [rng.randint(100, 20000), rng.randint(10, 3000),
                  rng.randint(1, 200), rng.randint(1, 100)]
        cells = [name]
        for j, v in enumerate(values):
            if blanks and rng.random() < 0.15 and j >= 2:
                cells.append("")
            elif v >= 1000 and rng.random() < 0.3:
                cells.append(f'"{v:,d}"')
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def _merged_table(rng: random.Random, n_rows: int) -> str:
    lines = [",".join(MI_HEADER_A)]
    for i in range(n_rows):
        name = MI_COUNTIES[i % len(MI_COUNTIES)] if i % 4 else ""
        cells = [name]
        for j in range(4):
            v = rng.randint(100, 9000)
            if (i + j) % (j + 2) == 0:
                cells.append(f"{v} {rng.randint(10, 999)}")
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def _extra_cells_table(rng: random.Random, n_rows: int) -> str:
    lines = [",".join(MI_HEADER_A)]
    for i in range(n_rows):
        cells = [MI_COUNTIES[i % len(MI_COUNTIES)]]
        cells += [str(rng.randint(10, 9000)) for _ in range(4)]
        if i % 3 == 0:
            cells.append(str(rng.randint(10, 99)))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def validator_corpus(seed: int = 0) -> list:
    """Twenty tables with hand labels: the classification acceptance set.

    Labels come from the construction pattern, never from running the
    validator: clean renderings are labeled fine, merged-cell cascades,
    spilled rows, and header-only tables are labeled critical.
    """
    rng = random.Random(seed)
    cases = []
    for i in range(7):
        cases.append(ValidatorCase(f"clean_{i}", "clean",
                                   _clean_table(rng, 12 + i, blanks=False), False))
    for i in range(3):
        cases.append(ValidatorCase(f"clean_blanks_{i}", "clean_blanks",
                                   _clean_table(rng, 10 + i, blanks=True), False))
    cases.append(ValidatorCase("mangled_canonical", "merged",
                               MICHIGAN_BASELINE_CSV, True))
    for i in range(3):
        cases.append(ValidatorCase(f"merged_{i}", "merged",
                                   _merged_table(rng, 10 + i), True))
    for i in range(3):
        cases.append(ValidatorCase(f"extra_{i}", "extra_cells",
                                   _extra_cells_table(rng, 9 + i), True))
    for i in range(3):
        cases.append(ValidatorCase(f"empty_{i}", "empty",
                                   ",".join(MI_HEADER_A) + "\n", True))
    assert len(cases) == 20
    return cases


# ---------------------------------------------------------------------------
# Synthetic gold sets for evaluation/convergence machinery
# ---------------------------------------------------------------------------


def synthetic_eval_fixture(n_tables: int, cells_per_table: int = 40,
                           error_rate: float = 0.1, missing_rate: float = 0.05,
                           seed: int = 0):
    """A gold set plus an extraction with homogeneous planted error rates."""
    rng = random.Random(seed)
    gold = []
    extracted = {}
    for t in range(n_tables):
        table_id = f"S{t:04d}"
        for c in range(cells_per_table):
            value = float(rng.randint(50, 30000))
            cell = GoldCell(table_id, f"c{c:02d}", "Automobiles", value)
            gold.append(cell)
            roll = rng.random()
            if roll < missing_rate:
                extracted[cell.key] = None
            elif roll < missing_rate + error_rate:
                extracted[cell.key] = value + rng.choice([-1, 1]) * rng.randint(1, 250)
            else:
                extracted[cell.key] = value
    return extracted, gold
