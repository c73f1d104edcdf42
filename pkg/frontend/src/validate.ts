/** Cell input validation, mirroring the pipeline's cell normalization:
 * a cell is a single non-negative integer count (comma grouping allowed) or
 * an empty marker. Anything else is rejected before it can reach the server.
 */

const EMPTY_MARKERS = new Set(["", "-", "—", ".", "…"]);

export type ParsedCell =
  | { kind: "numeric"; value: number }
  | { kind: "empty" }
  | { kind: "invalid"; reason: string };

export function parseCellInput(raw: string): ParsedCell {
  const stripped = raw.trim();
  if (EMPTY_MARKERS.has(stripped)) {
    return { kind: "empty" };
  }
  const joined = stripped.replace(/,\s*/g, "");
  if (/^[0-9]+$/.test(joined)) {
    return { kind: "numeric", value: Number(joined) };
  }
  return { kind: "invalid", reason: `not a count or empty: "${raw}"` };
}

/** Render a stored value back into the editor. */
export function cellToText(value: number | null): string {
  return value === null ? "" : String(value);
}
