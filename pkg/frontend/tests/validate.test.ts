import { test } from "node:test";
import assert from "node:assert/strict";

import { cellToText, parseCellInput } from "../src/validate.js";

test("plain and comma-grouped counts parse", () => {
  assert.deepEqual(parseCellInput("733"), { kind: "numeric", value: 733 });
  assert.deepEqual(parseCellInput("12,847"), { kind: "numeric", value: 12847 });
  assert.deepEqual(parseCellInput("1, 175"), { kind: "numeric", value: 1175 });
  assert.deepEqual(parseCellInput(" 42 "), { kind: "numeric", value: 42 });
  assert.deepEqual(parseCellInput("0"), { kind: "numeric", value: 0 });
});

test("empty markers normalize to empty", () => {
  for (const marker of ["", "  ", "-", "—", ".", "…"]) {
    assert.equal(parseCellInput(marker).kind, "empty");
  }
});

test("merged numbers and junk are invalid", () => {
  for (const raw of ["900 234", "abc", "12.5", "-5", "3a"]) {
    assert.equal(parseCellInput(raw).kind, "invalid");
  }
});

test("cell text round-trip", () => {
  assert.equal(cellToText(null), "");
  assert.equal(cellToText(733), "733");
  assert.deepEqual(parseCellInput(cellToText(12847)),
                   { kind: "numeric", value: 12847 });
});
