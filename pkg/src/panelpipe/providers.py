"""Model-provider plumbing: wire contract, HTTP adapter, offline mock,
retries with a token bucket, and an on-disk response cache.

The wire contract is a single JSON POST:

    request  {"model": str, "prompt": str,
              "image": {"media_type": str, "data": base64},
              "max_output_tokens": int}
    response {"text": str, "input_tokens": int, "output_tokens": int}

Adapters map this onto real vendor APIs; the mock provider speaks it natively
from a fixture directory so the whole pipeline runs offline.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import random
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

logger = logging.getLogger(__name__)

__all__ = [
    "ProviderRequest",
    "ProviderResponse",
    "ProviderError",
    "ProviderUnavailable",
    "HttpProvider",
    "MockProvider",
    "RetryPolicy",
    "RateLimiter",
    "RetryingProvider",
    "ResponseCache",
    "request_digest",
]


class ProviderError(Exception):
    """A single failed provider call (retryable)."""


class ProviderUnavailable(Exception):
    """Provider could not be reached within the retry budget."""


@dataclass(frozen=True)
class ProviderRequest:
    model_id: str
    prompt: str
    image: bytes
    media_type: str
    max_output: int = 8192

    @property
    def image_digest(self) -> str:
        return hashlib.sha256(self.image).hexdigest()

    def to_wire(self) -> dict:
        return {
            "model": self.model_id,
            "prompt": self.prompt,
            "image": {
                "media_type": self.media_type,
                "data": base64.b64encode(self.image).decode("ascii"),
            },
            "max_output_tokens": self.max_output,
        }


@dataclass(frozen=True)
class ProviderResponse:
    text: str
    input_tokens: int
    output_tokens: int

    def __post_init__(self):
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise ValueError("token counts must be non-negative")

    def to_wire(self) -> dict:
        return {
            "text": self.text,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
        }

    @classmethod
    def from_wire(cls, body: dict) -> "ProviderResponse":
        return cls(
            text=body["text"],
            input_tokens=int(body["input_tokens"]),
            output_tokens=int(body["output_tokens"]),
        )


def request_digest(model_id: str, prompt: str, image_digest: str) -> str:
    """Cache key over everything that determines a response."""
    h = hashlib.sha256()
    for part in (model_id, prompt, image_digest):
        h.update(part.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


class HttpProvider:
    """Speaks the wire contract against a real endpoint."""

    def __init__(self, endpoint: str, timeout: float = 120.0, session=None):
        import requests

        self.endpoint = endpoint
        self.timeout = timeout
        self.session = session or requests.Session()

    def complete(self, request: ProviderRequest) -> ProviderResponse:
        import requests

        try:
            resp = self.session.post(
                self.endpoint, json=request.to_wire(), timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise ProviderError(f"transport failure: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise ProviderError(f"retryable status {resp.status_code}")
        if resp.status_code != 200:
            raise ProviderUnavailable(f"status {resp.status_code}: {resp.text[:200]}")
        return ProviderResponse.from_wire(resp.json())


class MockProvider:
    """Fixture-backed provider for offline runs and tests.

    Fixtures live at ``<root>/<model_id>/<image_digest>.json`` holding the
    wire response plus an optional ``"fail_times": n`` that makes the first
    n calls for that fixture raise (to exercise the retry path).
    """

    def __init__(self, fixture_root: Path):
        self.fixture_root = Path(fixture_root)
        self.calls = 0
        self._failures_served: dict = {}
        self._lock = threading.Lock()

    def fixture_path(self, model_id: str, image_digest: str) -> Path:
        return self.fixture_root / model_id / f"{image_digest}.json"

    def complete(self, request: ProviderRequest) -> ProviderResponse:
        with self._lock:
            self.calls += 1
        path = self.fixture_path(request.model_id, request.image_digest)
        if not path.exists():
            raise ProviderUnavailable(f"no fixture for {request.model_id} at {path.name}")
        body = json.loads(path.read_text(encoding="utf-8"))
        fail_times = int(body.get("fail_times", 0))
        if fail_times:
            key = str(path)
            with self._lock:
                served = self._failures_served.get(key, 0)
                if served < fail_times:
                    self._failures_served[key] = served + 1
                    raise ProviderError(f"scripted failure {served + 1}/{fail_times}")
        return ProviderResponse.from_wire(body)

    @staticmethod
    def write_fixture(root: Path, model_id: str, image: bytes,
                      response: ProviderResponse, fail_times: int = 0) -> Path:
        digest = hashlib.sha256(image).hexdigest()
        path = Path(root) / model_id / f"{digest}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        body = response.to_wire()
        if fail_times:
            body["fail_times"] = fail_times
        path.write_text(json.dumps(body, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        return path


@dataclass(frozen=True)
class RetryPolicy:
    attempts: int = 3
    backoff_base: float = 0.5
    backoff_factor: float = 2.0
    jitter: float = 0.25

    def delay(self, attempt: int, rng: random.Random) -> float:
        base = self.backoff_base * (self.backoff_factor ** attempt)
        return base + rng.uniform(0, self.jitter * base) if base else 0.0


class RateLimiter:
    """Token bucket; acquire() blocks until a token is available."""

    def __init__(self, rate_per_second: float, capacity: int = 1):
        self.rate = float(rate_per_second)
        self.capacity = float(capacity)
        self._tokens = float(capacity)
        self._last = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self):
        if self.rate <= 0:
            return
        while True:
            with self._lock:
                now = time.monotonic()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            time.sleep(wait)


class RetryingProvider:
    """Wraps a provider with retry, backoff, and per-provider rate limiting."""

    def __init__(self, inner, policy: RetryPolicy = RetryPolicy(),
                 limiter: Optional[RateLimiter] = None, seed: int = 0):
        self.inner = inner
        self.policy = policy
        self.limiter = limiter
        self._rng = random.Random(seed)

    def complete(self, request: ProviderRequest) -> ProviderResponse:
        last_error = None
        for attempt in range(self.policy.attempts):
            if self.limiter is not None:
                self.limiter.acquire()
            try:
                return self.inner.complete(request)
            except ProviderError as exc:
                last_error = exc
                delay = self.policy.delay(attempt, self._rng)
                logger.debug("attempt %d failed (%s); sleeping %.2fs", attempt + 1, exc, delay)
                if delay:
                    time.sleep(delay)
        raise ProviderUnavailable(f"retry budget exhausted: {last_error}")


class ResponseCache:
    """Content-addressed response store with atomic writes.

    Keys cover (model id, prompt, image digest); values are the verbatim wire
    response, so a warm cache replays byte-identical bodies with zero calls.
    """

    def __init__(self, root: Path):
        self.root = Path(root)
        self.hits = 0
        self.misses = 0

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str) -> Optional[ProviderResponse]:
        path = self._path(key)
        if not path.exists():
            self.misses += 1
            return None
        self.hits += 1
        return ProviderResponse.from_wire(json.loads(path.read_text(encoding="utf-8")))

    def put(self, key: str, response: ProviderResponse):
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(f".tmp{os.getpid()}")
        tmp.write_text(json.dumps(response.to_wire(), sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, path)
