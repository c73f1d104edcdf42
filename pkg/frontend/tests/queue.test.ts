import { test } from "node:test";
import assert from "node:assert/strict";

import { orderQueue } from "../src/queue.js";
import type { FlagRecord, TableSummary } from "../src/types.js";

function table(id: string, status: TableSummary["status"], year = 1923): TableSummary {
  return { table_id: id, state: "MI", year, page: 1, status,
           open_flags: 0, corrections: 0 };
}

function flag(tableId: string, resolution: FlagRecord["resolution"]): FlagRecord {
  return { flag_id: `f-${tableId}`, kind: "crossfield", county_id: "c1",
           year: 1923, field: "Automobiles", table_id: tableId,
           detail: {}, resolution };
}

test("critical tables lead, reviewed tables sink", () => {
  const tables = [
    table("reviewed", "reviewed"),
    table("plain", "unreviewed"),
    table("broken", "critical"),
    table("flagged", "flagged"),
  ];
  const ordered = orderQueue(tables, []).map((t) => t.table_id);
  assert.deepEqual(ordered, ["broken", "flagged", "plain", "reviewed"]);
});

test("confirming a flag raises the table above other flagged ones", () => {
  const tables = [table("a", "flagged"), table("b", "flagged")];
  const ordered = orderQueue(tables, [flag("b", "confirmed")]);
  assert.deepEqual(ordered.map((t) => t.table_id), ["b", "a"]);
});

test("dismissed flags do not raise priority", () => {
  const tables = [table("a", "flagged"), table("b", "flagged")];
  const ordered = orderQueue(tables, [flag("b", "dismissed")]);
  assert.deepEqual(ordered.map((t) => t.table_id), ["a", "b"]);
});

test("stable tiebreak by state, year, page, id", () => {
  const tables = [
    table("z", "unreviewed", 1930),
    table("a", "unreviewed", 1920),
    table("m", "unreviewed", 1920),
  ];
  const ordered = orderQueue(tables, []).map((t) => t.table_id);
  assert.deepEqual(ordered, ["a", "m", "z"]);
});

test("input order does not matter", () => {
  const tables = [
    table("broken", "critical"),
    table("plain", "unreviewed"),
    table("flagged", "flagged"),
  ];
  const a = orderQueue(tables, []).map((t) => t.table_id);
  const b = orderQueue([...tables].reverse(), []).map((t) => t.table_id);
  assert.deepEqual(a, b);
});
