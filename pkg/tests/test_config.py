import json
from dataclasses import replace
from pathlib import Path

import pytest

from panelpipe import pipeline, synth
from panelpipe.config import RunConfig, load_config


class TestConfig:
    def test_relative_paths_resolve_against_config_file(self, tmp_path):
        (tmp_path / "config.json").write_text(json.dumps({
            "corpus_dir": ".", "output_dir": "run", "cache_dir": ".cache",
        }))
        cfg = load_config(tmp_path / "config.json")
        assert cfg.corpus_dir == tmp_path.resolve()
        assert cfg.output_dir == (tmp_path / "run").resolve()

    def test_hash_ignores_output_and_cache_locations(self, tmp_path):
        a = RunConfig(corpus_dir=tmp_path / "c", output_dir=tmp_path / "r1")
        b = RunConfig(corpus_dir=tmp_path / "c", output_dir=tmp_path / "r2",
                      cache_dir=tmp_path / "elsewhere")
        assert a.config_hash == b.config_hash

    def test_hash_sees_semantic_changes(self, tmp_path):
        a = RunConfig(corpus_dir=tmp_path / "c", output_dir=tmp_path / "r")
        b = replace(a, seed=99)
        c = replace(a, fuzzy_threshold=0.9)
        assert a.config_hash != b.config_hash
        assert a.config_hash != c.config_hash

    def test_invalid_settings_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            RunConfig(corpus_dir=tmp_path, output_dir=tmp_path / "r",
                      r_squared_mode="adjusted")
        with pytest.raises(ValueError):
            RunConfig(corpus_dir=tmp_path, output_dir=tmp_path / "r",
                      fuzzy_threshold=1.5)

    def test_fail_fast_on_missing_corpus_pieces(self, tmp_path):
        cfg = RunConfig(corpus_dir=tmp_path / "nowhere", output_dir=tmp_path / "r")
        with pytest.raises(ValueError) as err:
            pipeline.run_pipeline(cfg)
        message = str(err.value)
        assert "provenance sidecar" in message
        assert not (tmp_path / "r").exists() or not any((tmp_path / "r").iterdir())

    def test_http_provider_requires_endpoints(self, tmp_path):
        synth.generate_corpus(tmp_path / "c", seed=1)
        cfg = RunConfig(corpus_dir=tmp_path / "c", output_dir=tmp_path / "r",
                        provider_kind="http")
        with pytest.raises(ValueError) as err:
            pipeline.run_pipeline(cfg)
        assert "endpoint" in str(err.value)


class TestConcurrency:
    def test_parallel_extract_matches_serial(self, tmp_path):
        synth.generate_corpus(tmp_path / "c", seed=31)
        base = load_config(tmp_path / "c" / "config.json")
        serial = replace(base, output_dir=tmp_path / "serial", max_workers=1)
        parallel = replace(base, output_dir=tmp_path / "parallel", max_workers=4)
        pipeline.run_pipeline(serial)
        pipeline.run_pipeline(parallel)
        for rel in ("raw_index.jsonl", "panel.jsonl", "eval.json", "manifest.json"):
            assert (serial.output_dir / rel).read_bytes() == \
                (parallel.output_dir / rel).read_bytes(), rel
