import type {
  CellEdit,
  EvalReportPayload,
  FlagRecord,
  SaveResult,
  TableDetail,
  TableSummary,
} from "./types.js";

/** Thin typed client over the review API. The fetch implementation is
 * injectable so tests can run against an in-memory fake. */
export class ApiClient {
  constructor(
    private readonly fetchFn: typeof fetch,
    private readonly base: string = "",
  ) {}

  private async getJson<T>(path: string): Promise<T> {
    const resp = await this.fetchFn(this.base + path);
    if (!resp.ok) {
      throw new Error(`GET ${path} failed: ${resp.status}`);
    }
    return (await resp.json()) as T;
  }

  private async postJson<T>(path: string, body: unknown): Promise<T> {
    const resp = await this.fetchFn(this.base + path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    const payload = (await resp.json()) as T;
    if (!resp.ok && resp.status !== 400) {
      throw new Error(`POST ${path} failed: ${resp.status}`);
    }
    return payload;
  }

  listTables(): Promise<TableSummary[]> {
    return this.getJson("/api/tables");
  }

  tableDetail(tableId: string): Promise<TableDetail> {
    return this.getJson(`/api/tables/${encodeURIComponent(tableId)}`);
  }

  saveCorrections(tableId: string, edits: CellEdit[]): Promise<SaveResult> {
    return this.postJson(`/api/tables/${encodeURIComponent(tableId)}/corrections`, {
      edits,
    });
  }

  listFlags(includeResolved = false): Promise<FlagRecord[]> {
    const query = includeResolved ? "?include_resolved=1" : "";
    return this.getJson(`/api/flags${query}`);
  }

  resolveFlag(
    flagId: string,
    resolution: "confirmed" | "dismissed",
    note = "",
  ): Promise<FlagRecord> {
    return this.postJson(`/api/flags/${encodeURIComponent(flagId)}/resolution`, {
      resolution,
      note,
    });
  }

  report(): Promise<EvalReportPayload> {
    return this.getJson("/api/report");
  }
}
