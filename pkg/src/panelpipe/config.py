"""Run configuration: one JSON file drives every stage.

Relative paths resolve against the config file's directory. The config hash
covers the semantic settings only, not where outputs or caches land, so two
runs of the same configuration into different directories produce artifacts
with the same embedded hash.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from .quality import Thresholds

__all__ = ["RunConfig", "RetrySettings", "load_config", "DEFAULT_MODELS"]

DEFAULT_MODELS = ("model-a", "model-b")

# Settings that do not change results, excluded from the config hash.
_NON_SEMANTIC = {"output_dir", "cache_dir", "max_workers"}


@dataclass(frozen=True)
class RetrySettings:
    attempts: int = 3
    backoff_base: float = 0.5
    backoff_factor: float = 2.0
    jitter: float = 0.25
    rate_per_second: float = 0.0  # 0 disables rate limiting


@dataclass(frozen=True)
class RunConfig:
    corpus_dir: Path
    output_dir: Path
    cache_dir: Optional[Path] = None
    models: tuple = DEFAULT_MODELS
    provider_kind: str = "mock"  # mock | http
    provider_endpoints: dict = field(default_factory=dict)  # model_id -> url
    retry: RetrySettings = RetrySettings()
    batch_mode: bool = False
    max_output_tokens: int = 8192
    fuzzy_threshold: float = 0.84
    thresholds: Thresholds = Thresholds()
    folds: int = 100
    fold_step: int = 1
    fold_split: tuple = (0.5, 0.5)
    persistence_years: tuple = (1930, 1940, 1950, 1960)
    popgrowth_decades: tuple = (1920, 1930, 1940, 1950)
    max_initial_population: float = 50_000.0
    r_squared_mode: str = "correlation"
    seed: int = 0
    max_workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "corpus_dir", Path(self.corpus_dir))
        object.__setattr__(self, "output_dir", Path(self.output_dir))
        if self.cache_dir is not None:
            object.__setattr__(self, "cache_dir", Path(self.cache_dir))
        object.__setattr__(self, "models", tuple(self.models))
        if self.r_squared_mode not in ("correlation", "regression"):
            raise ValueError("r_squared_mode must be correlation or regression")
        if not (0 < self.fuzzy_threshold <= 1):
            raise ValueError("fuzzy_threshold must be in (0, 1]")

    # corpus layout -----------------------------------------------------
    @property
    def images_dir(self) -> Path:
        return self.corpus_dir / "images"

    @property
    def provenance_path(self) -> Path:
        return self.corpus_dir / "provenance.jsonl"

    @property
    def fixtures_dir(self) -> Path:
        return self.corpus_dir / "fixtures"

    @property
    def baseline_dir(self) -> Path:
        return self.corpus_dir / "baseline"

    @property
    def refdata_dir(self) -> Path:
        return self.corpus_dir / "refdata"

    @property
    def prices_path(self) -> Path:
        return self.corpus_dir / "prices.json"

    @property
    def population_path(self) -> Path:
        return self.corpus_dir / "population.csv"

    @property
    def state_totals_path(self) -> Path:
        return self.corpus_dir / "state_totals.csv"

    @property
    def gold_dir(self) -> Path:
        return self.corpus_dir / "gold"

    @property
    def resolved_cache_dir(self) -> Path:
        return self.cache_dir if self.cache_dir is not None else self.corpus_dir / ".cache"

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["corpus_dir"] = str(self.corpus_dir)
        payload["output_dir"] = str(self.output_dir)
        payload["cache_dir"] = str(self.cache_dir) if self.cache_dir else None
        payload["models"] = list(self.models)
        payload["fold_split"] = list(self.fold_split)
        payload["persistence_years"] = list(self.persistence_years)
        payload["popgrowth_decades"] = list(self.popgrowth_decades)
        return payload

    @property
    def config_hash(self) -> str:
        semantic = {k: v for k, v in self.to_dict().items() if k not in _NON_SEMANTIC}
        semantic["corpus_dir"] = Path(semantic["corpus_dir"]).name
        blob = json.dumps(semantic, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]


def load_config(path: Path) -> RunConfig:
    path = Path(path)
    raw = json.loads(path.read_text(encoding="utf-8"))
    base = path.parent

    def resolve(p):
        return (base / p).resolve() if p and not Path(p).is_absolute() else p

    kwargs = dict(raw)
    for key in ("corpus_dir", "output_dir", "cache_dir"):
        if kwargs.get(key):
            kwargs[key] = resolve(kwargs[key])
    if "retry" in kwargs:
        kwargs["retry"] = RetrySettings(**kwargs["retry"])
    if "thresholds" in kwargs:
        kwargs["thresholds"] = Thresholds(**kwargs["thresholds"])
    for key in ("models", "fold_split", "persistence_years", "popgrowth_decades"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return RunConfig(**kwargs)
