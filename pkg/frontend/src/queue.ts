import type { FlagRecord, TableSummary } from "./types.js";

/** Review queue ordering.
 *
 * Structurally broken tables come first (they block everything downstream),
 * then tables whose flags an annotator has confirmed, then other flagged
 * tables, then untouched ones; already-reviewed tables sink to the bottom.
 * Ties break on (state, year, page, table id) so the order is stable.
 */

const STATUS_RANK: Record<string, number> = {
  critical: 0,
  flagged: 2,
  unreviewed: 3,
  reviewed: 4,
};

export function queueRank(table: TableSummary, confirmedTables: Set<string>): number {
  if (table.status !== "critical" && confirmedTables.has(table.table_id)) {
    return 1;
  }
  return STATUS_RANK[table.status] ?? 3;
}

export function orderQueue(
  tables: TableSummary[],
  flags: FlagRecord[],
): TableSummary[] {
  const confirmed = new Set(
    flags.filter((f) => f.resolution === "confirmed").map((f) => f.table_id),
  );
  return [...tables].sort((a, b) => {
    const rank = queueRank(a, confirmed) - queueRank(b, confirmed);
    if (rank !== 0) return rank;
    if (a.state !== b.state) return a.state < b.state ? -1 : 1;
    if (a.year !== b.year) return a.year - b.year;
    if (a.page !== b.page) return a.page - b.page;
    return a.table_id < b.table_id ? -1 : a.table_id > b.table_id ? 1 : 0;
  });
}
