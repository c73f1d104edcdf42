"""Drive providers with templated prompts, cache responses, ensemble across
models, and account costs."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

from .providers import (
    ProviderRequest,
    ProviderResponse,
    ResponseCache,
    request_digest,
)
from .tables import ParseFailure, RawTable, TableProvenance, parse_raw_csv

logger = logging.getLogger(__name__)

__all__ = [
    "EMPTY_CELL_RULE",
    "DEFAULT_BASE_INSTRUCTIONS",
    "DEFAULT_STATE_OVERRIDES",
    "PromptTemplate",
    "ExtractionRequest",
    "ExtractionUnusable",
    "ExtractionClient",
    "render_prompt",
    "ensemble_cell",
    "ensemble_tables",
    "UsageRecord",
    "CostReport",
    "ConfigError",
    "estimate_cost",
]

# This instruction must survive verbatim in every rendered prompt; stray
# hallucinated values in blank cells were the single worst failure mode.
EMPTY_CELL_RULE = "Record all the empty cells as empty."

DEFAULT_BASE_INSTRUCTIONS = (
    "You are a careful researcher transcribing a scanned historical table "
    "into CSV. Transcribe exactly what is printed; never guess or invent a "
    "number. " + EMPTY_CELL_RULE + " Keep comma-grouped figures as a single "
    "number. The table may have multi-row headers; output every header row "
    "before the data rows. Reply with CSV only."
)

DEFAULT_STATE_OVERRIDES = {
    "IL": (
        "When the table splits Cook County into the city and the remainder, "
        "label those rows as the distinct entities \"Chicago\" and "
        "\"Cook Excluding Chicago\"; do not merge them into Cook."
    ),
}


@dataclass(frozen=True)
class PromptTemplate:
    base_instructions: str = DEFAULT_BASE_INSTRUCTIONS
    state_overrides: Mapping[str, str] = field(default_factory=lambda: dict(DEFAULT_STATE_OVERRIDES))

    def __post_init__(self):
        if EMPTY_CELL_RULE not in self.base_instructions:
            raise ValueError("base instructions must contain the empty-cell rule verbatim")


def render_prompt(template: PromptTemplate, state: str,
                  carried_headers: Optional[Sequence[Sequence[str]]] = None) -> str:
    """Assemble the extraction prompt: base + state override + carried headers."""
    parts = [template.base_instructions]
    override = template.state_overrides.get(state)
    if override:
        parts.append(override)
    if carried_headers:
        rendered = "\n".join(",".join(row) for row in carried_headers)
        parts.append(
            "This page continues a multi-page table. Its columns follow the "
            "header from the previous page:\n" + rendered
        )
    return "\n\n".join(parts)


@dataclass(frozen=True)
class ExtractionRequest:
    model_id: str
    prompt: str
    image: bytes
    media_type: str
    provenance: TableProvenance
    carried_headers: Optional[tuple] = None
    max_output: int = 8192

    def provider_request(self) -> ProviderRequest:
        return ProviderRequest(
            model_id=self.model_id,
            prompt=self.prompt,
            image=self.image,
            media_type=self.media_type,
            max_output=self.max_output,
        )


class ExtractionUnusable(Exception):
    """Response came back but had no parsable table; counts as a missing table."""

    def __init__(self, reason: str, text: str):
        super().__init__(reason)
        self.reason = reason
        self.text = text


@dataclass(frozen=True)
class UsageRecord:
    model_id: str
    input_tokens: int
    output_tokens: int

    def __post_init__(self):
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise ValueError("token counts must be non-negative")


class ExtractionClient:
    """Cache-through extraction: one client per (provider, cache) pair.

    Usage is recorded from the response that was *used*, cached or fresh, so
    cost accounting is identical between cold and warm runs.
    """

    def __init__(self, provider, cache: Optional[ResponseCache] = None):
        self.provider = provider
        self.cache = cache
        self.usage: list = []

    def fetch(self, request: ExtractionRequest) -> ProviderResponse:
        key = request_digest(
            request.model_id, request.prompt, request.provider_request().image_digest
        )
        response = self.cache.get(key) if self.cache is not None else None
        if response is None:
            response = self.provider.complete(request.provider_request())
            if self.cache is not None:
                self.cache.put(key, response)
        self.usage.append(UsageRecord(request.model_id, response.input_tokens,
                                      response.output_tokens))
        return response

    def extract_table(self, request: ExtractionRequest) -> RawTable:
        response = self.fetch(request)
        provenance = request.provenance.with_model(request.model_id)
        try:
            return parse_raw_csv(response.text, provenance)
        except ParseFailure as exc:
            raise ExtractionUnusable(exc.reason, exc.text) from exc


def extract_table(request: ExtractionRequest, provider,
                  cache: Optional[ResponseCache] = None) -> RawTable:
    """One-shot convenience wrapper around ExtractionClient."""
    return ExtractionClient(provider, cache).extract_table(request)


# ---------------------------------------------------------------------------
# Ensembling
# ---------------------------------------------------------------------------


def ensemble_cell(a: Optional[float], b: Optional[float]) -> Optional[float]:
    """Mean when both respond, otherwise the non-missing one, else missing.

    The mean of two integer counts is at worst half-integral, which binary
    floats represent exactly; rounding happens only at report emission.
    """
    if a is None:
        return b
    if b is None:
        return a
    return (a + b) / 2.0


def ensemble_values(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    if not present:
        return None
    return sum(present) / len(present)


def ensemble_tables(per_model: Mapping[str, "AlignedTable"]) -> "AlignedTable":
    """Cell-wise ensemble of aligned tables from several models.

    Tables must already be aligned (canonical row keys and field names), so a
    cell is comparable across models by key. Row keys missing from one model
    are covered by the others; per-model source values ride along for the
    duplicate-resolution cascade.
    """
    from .panel import AlignedTable

    if not per_model:
        raise ValueError("ensemble requires at least one aligned table")
    model_ids = sorted(per_model)
    first = per_model[model_ids[0]]
    row_keys = sorted({k for t in per_model.values() for k in t.rows})

    rows = {}
    support = {}
    for key in row_keys:
        row_out = {}
        sup_out = {}
        present_fields = sorted({
            f for m in model_ids for f in per_model[m].rows.get(key, {})
        })
        for fieldname in present_fields:
            contributions = {
                m: per_model[m].rows.get(key, {}).get(fieldname)
                for m in model_ids
                if per_model[m].rows.get(key, {}).get(fieldname) is not None
            }
            row_out[fieldname] = ensemble_values(list(contributions.values()))
            if contributions:
                sup_out[fieldname] = contributions
        if row_out:
            rows[key] = row_out
            support[key] = sup_out
    provenance = first.provenance.with_model("+".join(model_ids))
    return AlignedTable(provenance=provenance, rows=rows, model_values=support,
                        layout=first.layout)


# ---------------------------------------------------------------------------
# Cost accounting
# ---------------------------------------------------------------------------


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class CostReport:
    total: float
    input_cost: float
    output_cost: float
    input_share: float
    per_table_mean: float
    by_model: Mapping[str, float]
    n_tables: int
    batch_mode: bool

    def to_record(self) -> dict:
        return {
            "total": self.total,
            "input_cost": self.input_cost,
            "output_cost": self.output_cost,
            "input_share": self.input_share,
            "per_table_mean": self.per_table_mean,
            "by_model": dict(sorted(self.by_model.items())),
            "n_tables": self.n_tables,
            "batch_mode": self.batch_mode,
        }


def estimate_cost(usage: Sequence[UsageRecord],
                  prices: Mapping[str, tuple],
                  n_tables: int = 0,
                  batch_mode: bool = False) -> CostReport:
    """Dollar cost of a run from token usage and per-million-token rates.

    ``prices`` maps model id to (input rate, output rate) per million tokens.
    Batch mode halves the applied rates, mirroring vendor batch discounts.
    """
    for rates in prices.values():
        if rates[0] < 0 or rates[1] < 0:
            raise ConfigError("negative price rate")
    input_cost = 0.0
    output_cost = 0.0
    by_model: dict = {}
    scale = 0.5 if batch_mode else 1.0
    for record in usage:
        if record.model_id not in prices:
            raise ConfigError(f"no price configured for model {record.model_id!r}")
        in_rate, out_rate = prices[record.model_id]
        cost_in = record.input_tokens * (in_rate * scale) / 1_000_000.0
        cost_out = record.output_tokens * (out_rate * scale) / 1_000_000.0
        input_cost += cost_in
        output_cost += cost_out
        by_model[record.model_id] = by_model.get(record.model_id, 0.0) + cost_in + cost_out
    total = input_cost + output_cost
    return CostReport(
        total=total,
        input_cost=input_cost,
        output_cost=output_cost,
        input_share=(input_cost / total) if total else 0.0,
        per_table_mean=(total / n_tables) if n_tables else 0.0,
        by_model=by_model,
        n_tables=n_tables,
        batch_mode=batch_mode,
    )
