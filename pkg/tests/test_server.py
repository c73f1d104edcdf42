import json
from concurrent.futures import ThreadPoolExecutor
import threading
import urllib.error
import urllib.request

import pytest

from panelpipe import pipeline, synth
from panelpipe.config import load_config
from panelpipe.server import serve
from panelpipe.utils import read_json


@pytest.fixture(scope="module")
def stack(tmp_path_factory):
    root = tmp_path_factory.mktemp("server")
    spec = synth.generate_corpus(root / "c", seed=23)
    cfg = load_config(spec.out_dir / "config.json")
    pipeline.run_pipeline(cfg)
    server = serve(cfg, port=0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{server.server_address[1]}"
    yield spec, cfg, base
    server.shutdown()


def get(base, path):
    with urllib.request.urlopen(base + path) as resp:
        media = resp.headers.get("Content-Type", "")
        body = resp.read()
    return media, body


def get_json(base, path):
    media, body = get(base, path)
    assert media.startswith("application/json")
    return json.loads(body)


def post_json(base, path, payload, expect_error=False):
    req = urllib.request.Request(
        base + path, data=json.dumps(payload).encode("utf-8"),
        headers={"Content-Type": "application/json"}, method="POST",
    )
    try:
        with urllib.request.urlopen(req) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as err:
        if not expect_error:
            raise
        return err.code, json.loads(err.read())


class TestTables:
    def test_list_tables(self, stack):
        spec, _, base = stack
        tables = get_json(base, "/api/tables")
        assert len(tables) == len(spec.tables)
        assert {t["status"] for t in tables} <= \
            {"critical", "flagged", "reviewed", "unreviewed"}

    def test_detail_has_grids_and_mismatches(self, stack):
        spec, _, base = stack
        key = spec.gold_base_errors[0]
        detail = get_json(base, f"/api/tables/{key[0]}")
        assert detail["extraction_available"]
        assert key[1] in detail["counties"]
        assert {"county_id": key[1], "field": key[2]} in detail["mismatches"]

    def test_unknown_table_404(self, stack):
        _, _, base = stack
        with pytest.raises(urllib.error.HTTPError) as err:
            get(base, "/api/tables/nope")
        assert err.value.code == 404

    def test_image_served_as_png(self, stack):
        spec, _, base = stack
        table_id = spec.tables[0].table_id
        media, body = get(base, f"/api/tables/{table_id}/image")
        assert media == "image/png"
        assert body.startswith(b"\x89PNG")


class TestCorrections:
    def test_save_reload_roundtrip(self, stack):
        spec, cfg, base = stack
        table_id = spec.tables[1].table_id
        county = spec.tables[1].county_ids[0]
        fieldname = spec.tables[1].fields[0]
        status, result = post_json(base, f"/api/tables/{table_id}/corrections", {
            "edits": [{"county_id": county, "field": fieldname, "value": "4,321"}],
        })
        assert status == 200 and result["saved"] == 1
        detail = get_json(base, f"/api/tables/{table_id}")
        assert detail["gold_grid"][county][fieldname] == 4321

    def test_invalid_value_rejects_whole_save(self, stack):
        spec, cfg, base = stack
        table_id = spec.tables[1].table_id
        county = spec.tables[1].county_ids[1]
        fieldname = spec.tables[1].fields[0]
        before = pipeline.gold_store(cfg).get((table_id, county, fieldname))
        status, result = post_json(base, f"/api/tables/{table_id}/corrections", {
            "edits": [
                {"county_id": county, "field": fieldname, "value": "777"},
                {"county_id": county, "field": fieldname, "value": "not a number"},
            ],
        }, expect_error=True)
        assert status == 400
        assert result["saved"] == 0
        assert pipeline.gold_store(cfg).get((table_id, county, fieldname)) == before

    def test_empty_save_is_noop(self, stack):
        spec, cfg, base = stack
        log = cfg.gold_dir / "corrections.jsonl"
        size_before = log.stat().st_size if log.exists() else 0
        status, result = post_json(
            base, f"/api/tables/{spec.tables[1].table_id}/corrections", {"edits": []}
        )
        assert status == 200 and result["saved"] == 0
        size_after = log.stat().st_size if log.exists() else 0
        assert size_after == size_before

    def test_empty_marker_becomes_verified_empty(self, stack):
        spec, cfg, base = stack
        table_id = spec.tables[1].table_id
        county = spec.tables[1].county_ids[2]
        fieldname = spec.tables[1].fields[0]
        status, _ = post_json(base, f"/api/tables/{table_id}/corrections", {
            "edits": [{"county_id": county, "field": fieldname, "value": "-"}],
        })
        assert status == 200
        assert pipeline.gold_store(cfg)[(table_id, county, fieldname)] is None


class TestFlags:
    def test_resolution_roundtrip(self, stack):
        _, _, base = stack
        flags = get_json(base, "/api/flags?include_resolved=1")
        if not flags:
            pytest.skip("corpus produced no outlier flags")
        flag_id = flags[0]["flag_id"]
        status, record = post_json(base, f"/api/flags/{flag_id}/resolution", {
            "resolution": "dismissed", "note": "checked the scan",
        })
        assert status == 200 and record["resolution"] == "dismissed"
        default_queue = get_json(base, "/api/flags")
        assert flag_id not in {f["flag_id"] for f in default_queue}
        everything = get_json(base, "/api/flags?include_resolved=1")
        dismissed = [f for f in everything if f["flag_id"] == flag_id]
        assert dismissed and dismissed[0]["resolution"] == "dismissed"

    def test_unknown_flag_404(self, stack):
        _, _, base = stack
        status, _ = post_json(base, "/api/flags/nope/resolution",
                              {"resolution": "dismissed"}, expect_error=True)
        assert status == 404

    def test_bad_resolution_400(self, stack):
        _, _, base = stack
        flags = get_json(base, "/api/flags?include_resolved=1")
        if not flags:
            pytest.skip("corpus produced no outlier flags")
        status, _ = post_json(base, f"/api/flags/{flags[0]['flag_id']}/resolution",
                              {"resolution": "maybe"}, expect_error=True)
        assert status == 400


class TestReport:
    def test_correcting_stale_gold_decrements_incorrect(self, stack):
        spec, cfg, base = stack
        before = get_json(base, "/api/report")
        assert before["available"]
        table_id, county, fieldname = spec.gold_base_errors[1]
        prov = {t.table_id: t for t in spec.tables}[table_id]
        true_value = spec.truth[(prov.state, county, prov.year, fieldname)]
        status, _ = post_json(base, f"/api/tables/{table_id}/corrections", {
            "edits": [{"county_id": county, "field": fieldname, "value": true_value}],
        })
        assert status == 200
        after = get_json(base, "/api/report")
        assert after["n_incorrect"] == before["n_incorrect"] - 1


class TestConcurrencyAndInvariants:
    def test_concurrent_correction_appends_serialize(self, stack):
        spec, cfg, base = stack
        table = spec.tables[5]
        log = cfg.gold_dir / "corrections.jsonl"
        lines_before = len(log.read_text().splitlines()) if log.exists() else 0

        def worker(i):
            county = table.county_ids[i % len(table.county_ids)]
            return post_json(base, f"/api/tables/{table.table_id}/corrections", {
                "edits": [{"county_id": county, "field": table.fields[0],
                           "value": 9000 + i}],
            })

        with ThreadPoolExecutor(max_workers=8) as pool:
            results = list(pool.map(worker, range(16)))
        assert all(status == 200 and body["saved"] == 1 for status, body in results)
        lines = log.read_text().splitlines()
        assert len(lines) == lines_before + 16
        for line in lines:
            json.loads(line)  # every append is a whole, well-formed record

    def test_report_equals_fresh_evaluate_over_gold_store(self, stack):
        spec, cfg, base = stack
        from panelpipe import pipeline, quality

        via_api = get_json(base, "/api/report")
        gold = pipeline.gold_cells_list(cfg)
        extracted = quality.flatten_aligned(pipeline._load_ensembled(cfg))
        fresh = quality.evaluate_against_gold(extracted, gold, cfg.r_squared_mode)
        assert via_api["n_incorrect"] == fresh.n_incorrect
        assert via_api["n_missing"] == fresh.n_missing
        assert via_api["total_error_rate_pct"] == fresh.total_error_rate_pct
        assert via_api["r_squared_pct"] == fresh.r_squared_pct


class TestImageOnlyView:
    def test_table_without_extraction_serves_image_only(self, stack, monkeypatch):
        spec, cfg, base = stack
        from panelpipe.server import ReviewApp

        app = ReviewApp(cfg)
        victim = spec.tables[0].table_id
        real = ReviewApp._ensembled_by_table

        def without_victim(self):
            tables = real(self)
            tables.pop(victim, None)
            return tables

        monkeypatch.setattr(ReviewApp, "_ensembled_by_table", without_victim)
        detail = app.table_detail(victim)
        assert detail is not None
        assert detail["extraction_available"] is False
        assert detail["extracted_grid"] == {c: {} for c in detail["counties"]} or \
            all(not v for v in detail["extracted_grid"].values())
        assert detail["image_url"].endswith(f"/{victim}/image")
        assert app.image(victim) is not None
