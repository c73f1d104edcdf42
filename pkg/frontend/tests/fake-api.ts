/** In-memory stand-in for the review server, speaking the documented routes
 * with the same semantics: the gold store is base drafts overlaid by an
 * append-only correction log, saves are all-or-nothing, and the report is a
 * fresh comparison of the extraction against the current gold store.
 */

import type { CellValue, FlagRecord, TableSummary } from "../src/types.js";
import { parseCellInput } from "../src/validate.js";

export interface FakeTable {
  table_id: string;
  state: string;
  year: number;
  page: number;
  counties: string[];
  fields: string[];
  extracted: Record<string, Record<string, CellValue>>;
  goldBase: Record<string, Record<string, CellValue>>;
}

interface Correction {
  table_id: string;
  county_id: string;
  field: string;
  value: CellValue;
}

export class FakeServer {
  readonly corrections: Correction[] = [];
  readonly resolutions = new Map<string, { resolution: string; note: string }>();

  constructor(
    private readonly tables: FakeTable[],
    private readonly flags: FlagRecord[] = [],
  ) {}

  goldCell(table: FakeTable, county: string, field: string): CellValue {
    let value = table.goldBase[county]?.[field] ?? null;
    for (const c of this.corrections) {
      if (c.table_id === table.table_id && c.county_id === county && c.field === field) {
        value = c.value;
      }
    }
    return value;
  }

  private report() {
    let nCells = 0;
    let nMissing = 0;
    let nIncorrect = 0;
    for (const table of this.tables) {
      for (const county of table.counties) {
        for (const field of table.fields) {
          nCells += 1;
          const gold = this.goldCell(table, county, field);
          const ext = table.extracted[county]?.[field] ?? null;
          if (gold === null) {
            if (ext !== null) nIncorrect += 1;
          } else if (ext === null) {
            nMissing += 1;
          } else if (Math.round(ext) !== gold) {
            nIncorrect += 1;
          }
        }
      }
    }
    return {
      available: nCells > 0,
      n_cells: nCells,
      n_missing: nMissing,
      n_incorrect: nIncorrect,
      total_error_rate_pct: (100 * (nMissing + nIncorrect)) / Math.max(nCells, 1),
      missing_output_pct: (100 * nMissing) / Math.max(nCells, 1),
      incorrect_output_pct: (100 * nIncorrect) / Math.max(nCells, 1),
      r_squared_pct: 100,
      n_tables: this.tables.length,
    };
  }

  private detail(table: FakeTable) {
    const gold: Record<string, Record<string, CellValue>> = {};
    const mismatches: { county_id: string; field: string }[] = [];
    for (const county of table.counties) {
      gold[county] = {};
      for (const field of table.fields) {
        const value = this.goldCell(table, county, field);
        gold[county][field] = value;
        const ext = table.extracted[county]?.[field] ?? null;
        const extRounded = ext === null ? null : Math.round(ext);
        if (extRounded !== value) mismatches.push({ county_id: county, field });
      }
    }
    return {
      table_id: table.table_id,
      state: table.state,
      year: table.year,
      page: table.page,
      extraction_available: true,
      fields: [...table.fields],
      counties: [...table.counties],
      gold_grid: gold,
      extracted_grid: table.extracted,
      mismatches,
      flags: this.flags.filter((f) => f.table_id === table.table_id),
      image_url: `/api/tables/${table.table_id}/image`,
    };
  }

  private saveCorrections(tableId: string, edits: unknown[]) {
    const errors: { index: number; error: string }[] = [];
    const validated: Correction[] = [];
    edits.forEach((edit, i) => {
      const e = edit as Record<string, unknown>;
      if (!e.county_id || !e.field) {
        errors.push({ index: i, error: "county_id and field required" });
        return;
      }
      if (e.value === null) {
        validated.push({ table_id: tableId, county_id: String(e.county_id),
                         field: String(e.field), value: null });
        return;
      }
      const parsed = parseCellInput(String(e.value));
      if (parsed.kind === "invalid") {
        errors.push({ index: i, error: parsed.reason });
      } else {
        validated.push({
          table_id: tableId,
          county_id: String(e.county_id),
          field: String(e.field),
          value: parsed.kind === "numeric" ? parsed.value : null,
        });
      }
    });
    if (errors.length) {
      return { status: 400, body: { saved: 0, errors } };
    }
    this.corrections.push(...validated);
    return { status: 200, body: { saved: validated.length, errors: [] } };
  }

  /** A fetch-compatible callable bound to this server. */
  fetch = async (input: RequestInfo | URL, init?: RequestInit): Promise<Response> => {
    const url = String(input);
    const path = url.replace(/^https?:\/\/[^/]+/, "");
    const method = init?.method ?? "GET";
    const respond = (body: unknown, status = 200) =>
      new Response(JSON.stringify(body), {
        status,
        headers: { "Content-Type": "application/json" },
      });

    if (method === "GET") {
      if (path === "/api/tables") {
        const summaries: TableSummary[] = this.tables.map((t) => ({
          table_id: t.table_id, state: t.state, year: t.year, page: t.page,
          status: "unreviewed",
          open_flags: this.flags.filter((f) => f.table_id === t.table_id).length,
          corrections: this.corrections.filter((c) => c.table_id === t.table_id).length,
        }));
        return respond(summaries);
      }
      const detailMatch = path.match(/^\/api\/tables\/([^/]+)$/);
      if (detailMatch) {
        const table = this.tables.find((t) => t.table_id === decodeURIComponent(detailMatch[1]));
        if (!table) return respond({ error: "unknown table" }, 404);
        return respond(this.detail(table));
      }
      if (path.startsWith("/api/flags")) {
        const include = path.includes("include_resolved=1");
        const out = this.flags
          .map((f) => ({ ...f, resolution: this.resolutions.get(f.flag_id)?.resolution ?? null }))
          .filter((f) => include || f.resolution !== "dismissed");
        return respond(out);
      }
      if (path === "/api/report") {
        return respond(this.report());
      }
      return respond({ error: "not found" }, 404);
    }

    const body = init?.body ? JSON.parse(String(init.body)) : {};
    const saveMatch = path.match(/^\/api\/tables\/([^/]+)\/corrections$/);
    if (saveMatch) {
      const result = this.saveCorrections(
        decodeURIComponent(saveMatch[1]), body.edits ?? [],
      );
      return respond(result.body, result.status);
    }
    const flagMatch = path.match(/^\/api\/flags\/([^/]+)\/resolution$/);
    if (flagMatch) {
      const flagId = decodeURIComponent(flagMatch[1]);
      if (!this.flags.some((f) => f.flag_id === flagId)) {
        return respond({ error: "not found" }, 404);
      }
      if (body.resolution !== "confirmed" && body.resolution !== "dismissed") {
        return respond({ error: "bad resolution" }, 400);
      }
      this.resolutions.set(flagId, { resolution: body.resolution, note: body.note ?? "" });
      return respond({ flag_id: flagId, resolution: body.resolution, note: body.note ?? "" });
    }
    return respond({ error: "not found" }, 404);
  };
}

export function singleTableServer(): { server: FakeServer; table: FakeTable } {
  // extraction is right everywhere; the gold draft is stale at (c2, Trucks)
  const table: FakeTable = {
    table_id: "T1",
    state: "MI",
    year: 1923,
    page: 1,
    counties: ["c1", "c2", "c3"],
    fields: ["Automobiles", "Trucks"],
    extracted: {
      c1: { Automobiles: 733, Trucks: 39 },
      c2: { Automobiles: 1121, Trucks: 108 },
      c3: { Automobiles: 7631, Trucks: null },
    },
    goldBase: {
      c1: { Automobiles: 733, Trucks: 39 },
      c2: { Automobiles: 1121, Trucks: 119 },
      c3: { Automobiles: 7631, Trucks: null },
    },
  };
  return { server: new FakeServer([table]), table };
}
