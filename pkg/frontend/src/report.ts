import type { EvalReportPayload } from "./types.js";

/** Lines for the live evaluation panel shown next to the grid. */
export function reportLines(report: EvalReportPayload): string[] {
  if (!report.available) {
    return ["No gold cells yet - corrections will populate the report."];
  }
  const pct = (v: number | undefined) => (v === undefined ? "-" : v.toFixed(1));
  return [
    `R^2 vs gold: ${pct(report.r_squared_pct)}%`,
    `Total error rate: ${pct(report.total_error_rate_pct)}%`,
    `  missing: ${pct(report.missing_output_pct)}%  (${report.n_missing ?? 0} cells)`,
    `  incorrect: ${pct(report.incorrect_output_pct)}%  (${report.n_incorrect ?? 0} cells)`,
    `Cells: ${report.n_cells ?? 0} across ${report.n_tables ?? 0} tables`,
  ];
}
