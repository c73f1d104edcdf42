import { test } from "node:test";
import assert from "node:assert/strict";

import { ApiClient } from "../src/api.js";
import { GridModel } from "../src/grid.js";
import { FakeServer, singleTableServer } from "./fake-api.js";
import type { FlagRecord } from "../src/types.js";

function client(server: FakeServer): ApiClient {
  return new ApiClient(server.fetch as unknown as typeof fetch);
}

test("grid save then reload is lossless", async () => {
  const { server } = singleTableServer();
  const api = client(server);
  const detail = await api.tableDetail("T1");
  const grid = GridModel.fromDetail(detail);

  grid.setFocus(0, 0);
  grid.beginEdit();
  grid.setDraft("12,847");
  grid.commitEdit();
  grid.setFocus(1, 1); // a committed count, blanked by the annotator
  grid.beginEdit();
  grid.setDraft("-");
  grid.commitEdit();
  const result = await api.saveCorrections("T1", grid.dirtyEdits());
  assert.equal(result.saved, 2);
  grid.applySaved();

  const reloaded = GridModel.fromDetail(await api.tableDetail("T1"));
  for (let row = 0; row < grid.counties.length; row++) {
    for (let col = 0; col < grid.fields.length; col++) {
      assert.equal(reloaded.valueAt(row, col), grid.valueAt(row, col),
                   `cell ${row},${col}`);
    }
  }
});

test("correcting a stale gold cell decrements incorrect count by one", async () => {
  const { server, table } = singleTableServer();
  const api = client(server);
  const before = await api.report();
  assert.equal(before.n_incorrect, 1); // the planted stale draft cell

  const detail = await api.tableDetail("T1");
  assert.deepEqual(detail.mismatches, [{ county_id: "c2", field: "Trucks" }]);
  const grid = GridModel.fromDetail(detail);
  const row = grid.counties.indexOf("c2");
  const col = grid.fields.indexOf("Trucks");
  grid.setFocus(row, col);
  grid.beginEdit();
  grid.setDraft(String(table.extracted.c2.Trucks)); // the scan's true value
  assert.ok(grid.commitEdit());
  const result = await api.saveCorrections("T1", grid.dirtyEdits());
  assert.equal(result.saved, 1);
  grid.applySaved();

  const after = await api.report();
  assert.equal(after.n_incorrect, before.n_incorrect! - 1);
  assert.equal((await api.tableDetail("T1")).mismatches.length, 0);
});

test("a save with one invalid value writes nothing", async () => {
  const { server } = singleTableServer();
  const api = client(server);
  const result = await api.saveCorrections("T1", [
    { county_id: "c1", field: "Automobiles", value: 700 },
    { county_id: "c1", field: "Trucks", value: "garbled" as unknown as number },
  ]);
  assert.equal(result.saved, 0);
  assert.equal(result.errors.length, 1);
  assert.equal(server.corrections.length, 0);
  const detail = await client(server).tableDetail("T1");
  assert.equal(detail.gold_grid.c1.Automobiles, 733);
});

test("flag resolution round-trips and leaves the default queue", async () => {
  const flags: FlagRecord[] = [{
    flag_id: "crossfield:c1:1923:Automobiles", kind: "crossfield",
    county_id: "c1", year: 1923, field: "Automobiles", table_id: "T1",
    detail: { ratio: 0.2 },
  }];
  const { table } = singleTableServer();
  const server = new FakeServer([table], flags);
  const api = client(server);
  await api.resolveFlag(flags[0].flag_id, "dismissed", "checked scan");
  const open = await api.listFlags();
  assert.equal(open.length, 0);
  const all = await api.listFlags(true);
  assert.equal(all.length, 1);
  assert.equal(all[0].resolution, "dismissed");
});
