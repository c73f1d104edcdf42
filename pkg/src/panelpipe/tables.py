"""Core table representation: CSV parsing, cell normalization, structural checks.

A raw table is the verbatim grid a provider (or a stored fixture) returned,
split into header rows and data rows of typed cells. Structural validation
decides whether the grid is usable for numeric work at all; it never repairs
anything.
"""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, replace
from typing import Optional

__all__ = [
    "CellValue",
    "TableProvenance",
    "RawTable",
    "StructuralReport",
    "ParseFailure",
    "EMPTY_MARKERS",
    "normalize_cell",
    "render_numeric",
    "parse_raw_csv",
    "validate_structure",
]

# Glyphs that historical scans (and models told to preserve empties) leave in
# cells that carry no value. A bare period shows up as stray dot noise.
EMPTY_MARKERS = frozenset({"", "-", "—", ".", "…"})

# A numeric cell is a single non-negative integer count. Comma grouping (with
# optional space after the comma) is stripped; a bare space between digit runs
# means two merged numbers and is NOT numeric.
_COMMA_GROUP_RE = re.compile(r",\s*")
_DIGITS_RE = re.compile(r"[0-9]+")


class ParseFailure(Exception):
    """Raised when response text has no parsable table structure at all."""

    def __init__(self, reason: str, text: str):
        super().__init__(reason)
        self.reason = reason
        self.text = text


@dataclass(frozen=True)
class CellValue:
    """One table cell: empty, a numeric count, or unusable text."""

    kind: str  # "empty" | "numeric" | "text"
    raw: str
    value: Optional[int] = None

    def __post_init__(self):
        if self.kind == "numeric" and (self.value is None or self.value < 0):
            raise ValueError(f"numeric cell requires a non-negative value: {self.raw!r}")
        if self.kind != "numeric" and self.value is not None:
            raise ValueError(f"{self.kind} cell must not carry a value: {self.raw!r}")

    @property
    def is_content(self) -> bool:
        return self.kind != "empty"


@dataclass(frozen=True)
class TableProvenance:
    """Where a table came from and which model produced the extraction.

    ``ingestion_number`` is the monotone intake counter assigned when the
    source document entered the corpus; it is unique per
    (document_id, page, model_id). ``county`` is only set for year-sorted
    layouts where the whole table belongs to a single county.
    """

    document_id: str
    state: str
    year: int
    page: int
    ingestion_number: int
    model_id: str = ""
    vintage_id: str = ""
    county: Optional[str] = None

    @property
    def table_id(self) -> str:
        return f"{self.document_id}_p{self.page}"

    @property
    def source_key(self) -> tuple:
        return (self.document_id, self.page, self.model_id)

    def with_model(self, model_id: str) -> "TableProvenance":
        return replace(self, model_id=model_id)

    def with_vintage(self, vintage_id: str) -> "TableProvenance":
        return replace(self, vintage_id=vintage_id)


@dataclass(frozen=True)
class RawTable:
    """Parsed grid: one or more header rows above ragged data rows.

    Data rows keep whatever shape the provider emitted; raggedness is a fact
    the validator reports, not a parse error.
    """

    provenance: TableProvenance
    header_rows: tuple
    data_rows: tuple
    column_count: int

    @property
    def column_names(self) -> list:
        """Per-column header text, stacked fragments joined with one space."""
        names = []
        for i in range(self.column_count):
            parts = []
            for row in self.header_rows:
                if i < len(row) and row[i].strip():
                    parts.append(row[i].strip())
            names.append(" ".join(parts))
        return names

    def cell(self, row: int, col: int) -> CellValue:
        r = self.data_rows[row]
        if col < len(r):
            return r[col]
        return CellValue("empty", "")


@dataclass(frozen=True)
class StructuralReport:
    """Outcome of the critical-parse-failure check for one table."""

    failed_conditions: frozenset
    valid_column_indices: tuple

    # Condition names, fixed vocabulary.
    NO_VALID_COLUMNS = "no_valid_columns"
    EXTRA_CELLS = "extra_cells"
    EMPTY_TABLE = "empty_table"

    @property
    def is_critical_failure(self) -> bool:
        return bool(self.failed_conditions)

    def to_record(self) -> dict:
        return {
            "is_critical_failure": self.is_critical_failure,
            "failed_conditions": sorted(self.failed_conditions),
            "valid_column_indices": list(self.valid_column_indices),
        }


def normalize_cell(raw: str) -> CellValue:
    """Classify one raw cell string. Total function, never raises.

    Comma-grouped digits ("12,847") are a single count; digit runs separated
    by a bare space ("900 234") are two merged numbers and classify as text.
    """
    stripped = raw.strip()
    if stripped in EMPTY_MARKERS:
        return CellValue("empty", raw)
    joined = _COMMA_GROUP_RE.sub("", stripped)
    if _DIGITS_RE.fullmatch(joined):
        return CellValue("numeric", raw, value=int(joined))
    return CellValue("text", raw)


def render_numeric(value: int) -> str:
    """Write a count back with comma grouping, the dominant print convention."""
    return f"{value:,d}"


def _is_header_row(cells: list) -> bool:
    normalized = [normalize_cell(c) for c in cells]
    has_text = any(c.kind == "text" for c in normalized)
    has_numeric = any(c.kind == "numeric" for c in normalized)
    return has_text and not has_numeric


def parse_raw_csv(text: str, provenance: TableProvenance) -> RawTable:
    """Parse verbatim CSV response text into a RawTable.

    Leading rows count as header while they contain text and no numerics;
    everything after becomes data rows of normalized cells. Blank lines are
    skipped. Raises ParseFailure when there is no delimiter structure at all
    (empty input, prose without commas) or when no leading header row exists.
    """
    if not text.strip():
        raise ParseFailure("empty input", text)

    rows = [row for row in csv.reader(io.StringIO(text)) if row]
    if not rows:
        raise ParseFailure("no rows", text)
    if max(len(r) for r in rows) < 2:
        raise ParseFailure("no delimiter structure", text)

    header_rows = []
    idx = 0
    while idx < len(rows) and _is_header_row(rows[idx]):
        header_rows.append(tuple(cell.strip() for cell in rows[idx]))
        idx += 1
    if not header_rows:
        raise ParseFailure("no header row", text)

    column_count = max(len(r) for r in header_rows)
    data_rows = tuple(
        tuple(normalize_cell(cell) for cell in row) for row in rows[idx:]
    )
    return RawTable(
        provenance=provenance,
        header_rows=tuple(header_rows),
        data_rows=data_rows,
        column_count=column_count,
    )


def validate_structure(table: RawTable) -> StructuralReport:
    """Run the three critical-failure conditions against a parsed table.

    1. no_valid_columns: no column has at least one numeric cell and zero
       text cells (empties are allowed; an all-empty column is simply not
       valid and cannot rescue the table either way).
    2. extra_cells: some data row carries more content-bearing cells than the
       header defines columns.
    3. empty_table: zero data rows.
    """
    failed = set()

    if not table.data_rows:
        # An empty grid fails condition 3 alone; the column conditions are
        # about misparsed content and have nothing to inspect.
        return StructuralReport(
            failed_conditions=frozenset({StructuralReport.EMPTY_TABLE}),
            valid_column_indices=(),
        )

    for row in table.data_rows:
        if sum(1 for c in row if c.is_content) > table.column_count:
            failed.add(StructuralReport.EXTRA_CELLS)
            break

    valid_cols = []
    for col in range(table.column_count):
        saw_numeric = False
        saw_text = False
        for row in table.data_rows:
            if col >= len(row):
                continue
            kind = row[col].kind
            if kind == "numeric":
                saw_numeric = True
            elif kind == "text":
                saw_text = True
                break
        if saw_numeric and not saw_text:
            valid_cols.append(col)
    if not valid_cols:
        failed.add(StructuralReport.NO_VALID_COLUMNS)

    return StructuralReport(
        failed_conditions=frozenset(failed),
        valid_column_indices=tuple(valid_cols),
    )
