/** Payload shapes of the review API (see the repo README for the routes). */

export type CellValue = number | null;

export type TableStatus = "critical" | "flagged" | "reviewed" | "unreviewed";

export interface TableSummary {
  table_id: string;
  state: string;
  year: number;
  page: number;
  status: TableStatus;
  open_flags: number;
  corrections: number;
}

export interface FlagRecord {
  flag_id: string;
  kind: "population" | "timeseries" | "crossfield" | "duplicate";
  county_id: string;
  year: number;
  field: string;
  table_id: string;
  detail: Record<string, unknown>;
  resolution?: "confirmed" | "dismissed" | null;
  note?: string;
}

export interface Mismatch {
  county_id: string;
  field: string;
}

export interface TableDetail {
  table_id: string;
  state: string;
  year: number;
  page: number;
  extraction_available: boolean;
  fields: string[];
  counties: string[];
  gold_grid: Record<string, Record<string, CellValue>>;
  extracted_grid: Record<string, Record<string, CellValue>>;
  mismatches: Mismatch[];
  flags: FlagRecord[];
  image_url: string;
}

export interface CellEdit {
  county_id: string;
  field: string;
  value: CellValue;
}

export interface SaveResult {
  saved: number;
  errors: { index: number; error: string }[];
}

export interface EvalReportPayload {
  available: boolean;
  r_squared_pct?: number;
  total_error_rate_pct?: number;
  missing_output_pct?: number;
  incorrect_output_pct?: number;
  mean_abs_error_pct?: number;
  n_cells?: number;
  n_tables?: number;
  n_missing?: number;
  n_incorrect?: number;
}
