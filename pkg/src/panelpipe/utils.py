"""Deterministic artifact IO.

Every text artifact starts with a comment line carrying the run's config
hash; readers here skip comment lines. JSON is always emitted with sorted
keys so reruns are byte-identical, and writes go through a temp file plus
rename so a crash never leaves a half-written artifact.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Iterable, Iterator


def dumps_stable(payload) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def atomic_write_text(path: Path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def artifact_header(config_hash: str, stage: str) -> str:
    return f"# panelpipe config_hash={config_hash} stage={stage}\n"


def write_jsonl(path: Path, records: Iterable[dict], config_hash: str = "",
                stage: str = ""):
    lines = []
    if config_hash:
        lines.append(artifact_header(config_hash, stage).rstrip("\n"))
    lines.extend(dumps_stable(r) for r in records)
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_jsonl(path: Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            yield json.loads(line)


def write_json(path: Path, payload: dict, config_hash: str = ""):
    body = dict(payload)
    if config_hash:
        body["config_hash"] = config_hash
    atomic_write_text(path, json.dumps(body, sort_keys=True, indent=1) + "\n")


def read_json(path: Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_csv_text(path: Path, header: str, rows: Iterable[str],
                   config_hash: str = "", stage: str = ""):
    lines = []
    if config_hash:
        lines.append(artifact_header(config_hash, stage).rstrip("\n"))
    lines.append(header)
    lines.extend(rows)
    atomic_write_text(path, "\n".join(lines) + "\n")
