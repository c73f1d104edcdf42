import base64
import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from panelpipe.providers import (
    HttpProvider,
    ProviderError,
    ProviderRequest,
    ProviderResponse,
    ProviderUnavailable,
    RateLimiter,
    RetryPolicy,
    RetryingProvider,
    ResponseCache,
    request_digest,
)


class WireHandler(BaseHTTPRequestHandler):
    """A tiny real endpoint speaking the documented wire contract."""

    scripted_failures = 0
    seen: list = []

    def log_message(self, fmt, *args):
        pass

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append(body)
        if type(self).scripted_failures > 0:
            type(self).scripted_failures -= 1
            self.send_response(503)
            self.end_headers()
            return
        image = base64.b64decode(body["image"]["data"])
        payload = json.dumps({
            "text": f"County,Autos\nAlcona,{len(image)}\n",
            "input_tokens": len(body["prompt"]),
            "output_tokens": 25,
        }).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)


@pytest.fixture()
def wire_server():
    WireHandler.scripted_failures = 0
    WireHandler.seen = []
    server = ThreadingHTTPServer(("127.0.0.1", 0), WireHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()


def make_request(image=b"12345", prompt="extract the table"):
    return ProviderRequest(model_id="model-a", prompt=prompt, image=image,
                           media_type="image/png", max_output=1024)


class TestHttpProvider:
    def test_request_response_roundtrip(self, wire_server):
        provider = HttpProvider(wire_server)
        response = provider.complete(make_request())
        assert response.text == "County,Autos\nAlcona,5\n"
        assert response.input_tokens == len("extract the table")
        sent = WireHandler.seen[-1]
        assert sent["model"] == "model-a"
        assert sent["max_output_tokens"] == 1024
        assert sent["image"]["media_type"] == "image/png"
        assert base64.b64decode(sent["image"]["data"]) == b"12345"

    def test_retryable_status_raises_provider_error(self, wire_server):
        WireHandler.scripted_failures = 1
        with pytest.raises(ProviderError):
            HttpProvider(wire_server).complete(make_request())

    def test_retry_wrapper_recovers(self, wire_server):
        WireHandler.scripted_failures = 2
        provider = RetryingProvider(HttpProvider(wire_server),
                                    RetryPolicy(attempts=3, backoff_base=0.0))
        response = provider.complete(make_request())
        assert response.output_tokens == 25
        assert len(WireHandler.seen) == 3

    def test_unreachable_endpoint(self):
        provider = RetryingProvider(HttpProvider("http://127.0.0.1:9", timeout=0.2),
                                    RetryPolicy(attempts=2, backoff_base=0.0))
        with pytest.raises(ProviderUnavailable):
            provider.complete(make_request())


class TestCache:
    def test_keying_covers_model_prompt_image(self, tmp_path):
        cache = ResponseCache(tmp_path)
        response = ProviderResponse("x", 1, 2)
        key = request_digest("model-a", "p", "d")
        cache.put(key, response)
        assert cache.get(key) == response
        assert cache.get(request_digest("model-b", "p", "d")) is None
        assert cache.get(request_digest("model-a", "q", "d")) is None
        assert cache.get(request_digest("model-a", "p", "e")) is None

    def test_atomic_write_leaves_no_temp_files(self, tmp_path):
        cache = ResponseCache(tmp_path)
        key = request_digest("model-a", "p", "d")
        cache.put(key, ProviderResponse("x", 1, 2))
        leftovers = [p for p in tmp_path.rglob("*.tmp*")]
        assert leftovers == []


class TestRateLimiter:
    def test_bucket_paces_calls(self):
        limiter = RateLimiter(rate_per_second=200.0, capacity=1)
        started = time.monotonic()
        for _ in range(5):
            limiter.acquire()
        elapsed = time.monotonic() - started
        # four refills at 5ms each, generous upper bound for slow machines
        assert elapsed >= 0.015

    def test_zero_rate_disables(self):
        limiter = RateLimiter(rate_per_second=0.0)
        started = time.monotonic()
        for _ in range(100):
            limiter.acquire()
        assert time.monotonic() - started < 0.1
