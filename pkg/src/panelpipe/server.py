"""Local HTTP API for the review UI.

Serves run artifacts read-only and accepts two kinds of human input, both as
append-only logs in the corpus gold store: cell corrections (building the
gold dataset) and outlier-flag resolutions. The live report endpoint reruns
the gold evaluation on every request, so the panel the annotator sees always
equals a fresh evaluate over base extractions plus the correction log.

Bodies are JSON. Corrections are all-or-nothing per save: every edited value
must normalize to a numeric count or an empty cell or nothing is written.
"""

from __future__ import annotations

import json
import logging
import threading
from collections import defaultdict
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional
from urllib.parse import parse_qs, urlparse

from . import quality as q
from .config import RunConfig
from .pipeline import (
    _load_ensembled,
    gold_store,
    load_provenance,
)
from .tables import normalize_cell
from .utils import dumps_stable, read_jsonl

logger = logging.getLogger(__name__)

__all__ = ["ReviewApp", "serve"]


class ReviewApp:
    """Request-independent application state plus the endpoint handlers."""

    def __init__(self, cfg: RunConfig, ui_dir: Optional[Path] = None):
        self.cfg = cfg
        self.ui_dir = Path(ui_dir) if ui_dir else None
        self._append_lock = threading.Lock()

    # ------------------------------------------------------------------
    # data access
    # ------------------------------------------------------------------

    def _ensembled_by_table(self) -> dict:
        return {t.table_id: t for t in _load_ensembled(self.cfg)}

    def _flags(self) -> list:
        path = self.cfg.output_dir / "flags.jsonl"
        if not path.exists():
            return []
        return list(read_jsonl(path))

    def _resolutions(self) -> dict:
        path = self.cfg.gold_dir / "flag_resolutions.jsonl"
        out: dict = {}
        if path.exists():
            for rec in read_jsonl(path):  # replay: last write wins
                out[rec["flag_id"]] = rec
        return out

    def _corrections_by_table(self) -> dict:
        path = self.cfg.gold_dir / "corrections.jsonl"
        out: dict = defaultdict(int)
        if path.exists():
            for rec in read_jsonl(path):
                out[rec["table_id"]] += 1
        return out

    def _structural(self) -> dict:
        path = self.cfg.output_dir / "structural.jsonl"
        ok_by_table: dict = defaultdict(list)
        if path.exists():
            for rec in read_jsonl(path):
                if rec["source"] != "baseline":
                    ok_by_table[rec["table_id"]].append(not rec["is_critical_failure"])
        return ok_by_table

    # ------------------------------------------------------------------
    # endpoints
    # ------------------------------------------------------------------

    def list_tables(self) -> list:
        provenance = load_provenance(self.cfg)
        structural = self._structural()
        resolutions = self._resolutions()
        flags_by_table: dict = defaultdict(int)
        for flag in self._flags():
            resolution = resolutions.get(flag["flag_id"], {}).get("resolution")
            if resolution != "dismissed":
                flags_by_table[flag["table_id"]] += 1
        corrections = self._corrections_by_table()
        out = []
        for table_id in sorted(provenance):
            prov = provenance[table_id]
            lanes = structural.get(table_id, [])
            if lanes and not any(lanes):
                status = "critical"
            elif flags_by_table.get(table_id):
                status = "flagged"
            elif corrections.get(table_id):
                status = "reviewed"
            else:
                status = "unreviewed"
            out.append({
                "table_id": table_id,
                "state": prov.state,
                "year": prov.year,
                "page": prov.page,
                "status": status,
                "open_flags": flags_by_table.get(table_id, 0),
                "corrections": corrections.get(table_id, 0),
            })
        return out

    def table_detail(self, table_id: str) -> Optional[dict]:
        provenance = load_provenance(self.cfg)
        if table_id not in provenance:
            return None
        prov = provenance[table_id]
        ensembled = self._ensembled_by_table().get(table_id)
        gold = {
            (county, fieldname): value
            for (tid, county, fieldname), value in gold_store(self.cfg).items()
            if tid == table_id
        }
        fields: list = []
        rows: dict = defaultdict(dict)
        extracted: dict = defaultdict(dict)
        if ensembled is not None:
            for (county, _year), row in sorted(ensembled.rows.items()):
                for fieldname, value in row.items():
                    if fieldname not in fields:
                        fields.append(fieldname)
                    extracted[county][fieldname] = value
        for (county, fieldname), value in sorted(gold.items()):
            if fieldname not in fields:
                fields.append(fieldname)
            rows[county][fieldname] = value
        counties = sorted(set(rows) | set(extracted))
        flags = [f for f in self._flags() if f["table_id"] == table_id]
        resolutions = self._resolutions()
        for flag in flags:
            flag["resolution"] = resolutions.get(flag["flag_id"], {}).get("resolution")
        mismatches = [
            {"county_id": county, "field": fieldname}
            for county in counties
            for fieldname in fields
            if _rounded(extracted.get(county, {}).get(fieldname))
            != _rounded(rows.get(county, {}).get(fieldname))
        ]
        return {
            "table_id": table_id,
            "state": prov.state,
            "year": prov.year,
            "page": prov.page,
            "extraction_available": ensembled is not None,
            "fields": sorted(fields),
            "counties": counties,
            "gold_grid": {c: dict(sorted(rows.get(c, {}).items())) for c in counties},
            "extracted_grid": {c: dict(sorted(extracted.get(c, {}).items()))
                               for c in counties},
            "mismatches": mismatches,
            "flags": flags,
            "image_url": f"/api/tables/{table_id}/image",
        }

    def image(self, table_id: str) -> Optional[bytes]:
        path = self.cfg.images_dir / f"{table_id}.png"
        return path.read_bytes() if path.exists() else None

    def save_corrections(self, table_id: str, edits: list) -> dict:
        provenance = load_provenance(self.cfg)
        if table_id not in provenance:
            raise KeyError(table_id)
        validated = []
        errors = []
        for i, edit in enumerate(edits):
            county = edit.get("county_id")
            fieldname = edit.get("field")
            value = edit.get("value")
            if not county or not fieldname:
                errors.append({"index": i, "error": "county_id and field required"})
                continue
            if value is None:
                validated.append((county, fieldname, None))
                continue
            cell = normalize_cell(str(value))
            if cell.kind == "numeric":
                validated.append((county, fieldname, cell.value))
            elif cell.kind == "empty":
                validated.append((county, fieldname, None))
            else:
                errors.append({"index": i, "error": f"not a count or empty: {value!r}"})
        if errors:
            return {"saved": 0, "errors": errors}
        if not validated:
            return {"saved": 0, "errors": []}  # empty save is a no-op
        path = self.cfg.gold_dir / "corrections.jsonl"
        with self._append_lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "a", encoding="utf-8") as fh:
                for county, fieldname, value in validated:
                    fh.write(dumps_stable({
                        "table_id": table_id, "county_id": county,
                        "field": fieldname, "value": value,
                    }) + "\n")
        return {"saved": len(validated), "errors": []}

    def list_flags(self, include_resolved: bool = False) -> list:
        resolutions = self._resolutions()
        out = []
        for flag in self._flags():
            resolution = resolutions.get(flag["flag_id"])
            flag["resolution"] = resolution.get("resolution") if resolution else None
            flag["note"] = resolution.get("note", "") if resolution else ""
            if not include_resolved and flag["resolution"] == "dismissed":
                continue
            out.append(flag)
        return out

    def resolve_flag(self, flag_id: str, resolution: str, note: str = "") -> dict:
        if resolution not in ("confirmed", "dismissed"):
            raise ValueError("resolution must be confirmed or dismissed")
        known = {f["flag_id"] for f in self._flags()}
        if flag_id not in known:
            raise KeyError(flag_id)
        record = {"flag_id": flag_id, "resolution": resolution, "note": note}
        path = self.cfg.gold_dir / "flag_resolutions.jsonl"
        with self._append_lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "a", encoding="utf-8") as fh:
                fh.write(dumps_stable(record) + "\n")
        return record

    def report(self) -> dict:
        gold = [q.GoldCell(tid, county, fieldname, value)
                for (tid, county, fieldname), value in sorted(gold_store(self.cfg).items())]
        extracted = q.flatten_aligned(self._ensembled_by_table().values())
        try:
            report = q.evaluate_against_gold(extracted, gold, self.cfg.r_squared_mode)
        except q.EmptyEvaluation:
            return {"available": False}
        record = report.to_record()
        record["available"] = True
        return record


def _rounded(value):
    return None if value is None else float(round(value))


# ---------------------------------------------------------------------------
# HTTP plumbing
# ---------------------------------------------------------------------------

_MEDIA_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".png": "image/png",
    ".svg": "image/svg+xml",
    ".map": "application/json",
}


class _Handler(BaseHTTPRequestHandler):
    app: ReviewApp  # set by serve()

    def log_message(self, fmt, *args):
        logger.debug("http: " + fmt, *args)

    def _send_json(self, payload, status=200):
        body = json.dumps(payload, sort_keys=True).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_bytes(self, body: bytes, media_type: str, status=200):
        self.send_response(status)
        self.send_header("Content-Type", media_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length", 0))
        if not length:
            return {}
        return json.loads(self.rfile.read(length).decode("utf-8"))

    def do_GET(self):
        url = urlparse(self.path)
        parts = [p for p in url.path.split("/") if p]
        try:
            if parts[:2] == ["api", "tables"] and len(parts) == 2:
                return self._send_json(self.app.list_tables())
            if parts[:2] == ["api", "tables"] and len(parts) == 3:
                detail = self.app.table_detail(parts[2])
                if detail is None:
                    return self._send_json({"error": "unknown table"}, 404)
                return self._send_json(detail)
            if parts[:2] == ["api", "tables"] and len(parts) == 4 and parts[3] == "image":
                image = self.app.image(parts[2])
                if image is None:
                    return self._send_json({"error": "no image"}, 404)
                return self._send_bytes(image, "image/png")
            if parts[:2] == ["api", "flags"] and len(parts) == 2:
                include = parse_qs(url.query).get("include_resolved", ["0"])[0] == "1"
                return self._send_json(self.app.list_flags(include))
            if parts[:2] == ["api", "report"]:
                return self._send_json(self.app.report())
            return self._serve_static(url.path)
        except Exception as exc:  # noqa: BLE001 - boundary
            logger.exception("GET %s failed", self.path)
            return self._send_json({"error": str(exc)}, 500)

    def do_POST(self):
        parts = [p for p in urlparse(self.path).path.split("/") if p]
        try:
            body = self._read_body()
            if parts[:2] == ["api", "tables"] and len(parts) == 4 \
                    and parts[3] == "corrections":
                result = self.app.save_corrections(parts[2], body.get("edits", []))
                status = 400 if result["errors"] else 200
                return self._send_json(result, status)
            if parts[:2] == ["api", "flags"] and len(parts) == 4 \
                    and parts[3] == "resolution":
                record = self.app.resolve_flag(
                    parts[2], body.get("resolution", ""), body.get("note", "")
                )
                return self._send_json(record)
            return self._send_json({"error": "unknown endpoint"}, 404)
        except KeyError as exc:
            return self._send_json({"error": f"not found: {exc}"}, 404)
        except (ValueError, json.JSONDecodeError) as exc:
            return self._send_json({"error": str(exc)}, 400)
        except Exception as exc:  # noqa: BLE001 - boundary
            logger.exception("POST %s failed", self.path)
            return self._send_json({"error": str(exc)}, 500)

    def _serve_static(self, path: str):
        if self.app.ui_dir is None:
            return self._send_json({"error": "no ui assets configured"}, 404)
        rel = path.lstrip("/") or "index.html"
        target = (self.app.ui_dir / rel).resolve()
        if not str(target).startswith(str(self.app.ui_dir.resolve())) \
                or not target.is_file():
            return self._send_json({"error": "not found"}, 404)
        media = _MEDIA_TYPES.get(target.suffix, "application/octet-stream")
        return self._send_bytes(target.read_bytes(), media)


def serve(cfg: RunConfig, host: str = "127.0.0.1", port: int = 8765,
          ui_dir: Optional[Path] = None) -> ThreadingHTTPServer:
    """Start the review server; returns the server object (caller shuts down)."""
    app = ReviewApp(cfg, ui_dir=ui_dir)
    handler = type("BoundHandler", (_Handler,), {"app": app})
    server = ThreadingHTTPServer((host, port), handler)
    logger.info("review server on http://%s:%d", host, server.server_address[1])
    return server
