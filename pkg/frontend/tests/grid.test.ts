import { test } from "node:test";
import assert from "node:assert/strict";

import { GridModel } from "../src/grid.js";

function makeGrid(): GridModel {
  return new GridModel(
    ["c1", "c2", "c3"],
    ["Automobiles", "Trucks"],
    {
      c1: { Automobiles: 733, Trucks: 39 },
      c2: { Automobiles: 1121, Trucks: 108 },
      c3: { Automobiles: 7631, Trucks: null },
    },
  );
}

test("arrow navigation clamps at the edges", () => {
  const grid = makeGrid();
  grid.handleKey("ArrowUp");
  grid.handleKey("ArrowLeft");
  assert.deepEqual(grid.focus, { row: 0, col: 0 });
  for (let i = 0; i < 10; i++) grid.handleKey("ArrowDown");
  for (let i = 0; i < 10; i++) grid.handleKey("ArrowRight");
  assert.deepEqual(grid.focus, { row: 2, col: 1 });
});

test("enter edits, enter again commits and moves down", () => {
  const grid = makeGrid();
  assert.equal(grid.handleKey("Enter"), "editing");
  assert.equal(grid.draftText, "733");
  grid.setDraft("735");
  assert.equal(grid.handleKey("Enter"), "committed");
  assert.deepEqual(grid.focus, { row: 1, col: 0 });
  assert.equal(grid.valueAt(0, 0), 735);
  assert.equal(grid.dirtyCount, 1);
});

test("escape cancels without staging an edit", () => {
  const grid = makeGrid();
  grid.handleKey("Enter");
  grid.setDraft("999999");
  assert.equal(grid.handleKey("Escape"), "cancelled");
  assert.equal(grid.valueAt(0, 0), 733);
  assert.equal(grid.dirtyCount, 0);
});

test("typing a character seeds the editor", () => {
  const grid = makeGrid();
  assert.equal(grid.handleKey("4"), "editing");
  assert.equal(grid.draftText, "4");
});

test("invalid input is rejected inline and nothing is staged", () => {
  const grid = makeGrid();
  grid.handleKey("Enter");
  grid.setDraft("abc");
  assert.equal(grid.handleKey("Enter"), "rejected");
  assert.ok(grid.editing, "editor stays open for correction");
  assert.ok(grid.error && grid.error.includes("abc"));
  assert.equal(grid.dirtyCount, 0);
});

test("comma-grouped input commits the parsed count", () => {
  const grid = makeGrid();
  grid.handleKey("Enter");
  grid.setDraft("12,847");
  grid.handleKey("Enter");
  assert.equal(grid.valueAt(0, 0), 12847);
});

test("delete stages an empty cell", () => {
  const grid = makeGrid();
  assert.equal(grid.handleKey("Delete"), "committed");
  assert.equal(grid.valueAt(0, 0), null);
  assert.equal(grid.dirtyCount, 1);
});

test("editing back to the committed value un-stages the cell", () => {
  const grid = makeGrid();
  grid.handleKey("Enter");
  grid.setDraft("735");
  grid.handleKey("Enter");
  assert.equal(grid.dirtyCount, 1);
  grid.setFocus(0, 0);
  grid.handleKey("Enter");
  grid.setDraft("733");
  grid.handleKey("Enter");
  assert.equal(grid.dirtyCount, 0);
});

test("unsaved edits survive navigation, clear only on save or discard", () => {
  const grid = makeGrid();
  grid.handleKey("Enter");
  grid.setDraft("735");
  grid.handleKey("Enter");
  grid.handleKey("ArrowDown");
  grid.handleKey("ArrowRight");
  assert.equal(grid.dirtyCount, 1);
  assert.deepEqual(grid.dirtyEdits(),
                   [{ county_id: "c1", field: "Automobiles", value: 735 }]);
  grid.applySaved();
  assert.equal(grid.dirtyCount, 0);
  assert.equal(grid.valueAt(0, 0), 735);
});

test("discard restores committed values", () => {
  const grid = makeGrid();
  grid.handleKey("Enter");
  grid.setDraft("1");
  grid.handleKey("Enter");
  grid.discardEdits();
  assert.equal(grid.dirtyCount, 0);
  assert.equal(grid.valueAt(0, 0), 733);
});
