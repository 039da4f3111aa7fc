"""Shared fixtures: deterministic hypothesis profile, image helpers, a stub
HTTP endpoint for wire-protocol tests, and the acceptance-criteria reporter.
"""

from __future__ import annotations

import http.server
import json
import threading
from contextlib import contextmanager
from time import perf_counter

import numpy as np
import pytest
from hypothesis import settings

from maskdetect.core import ImageBuffer, MaskBuffer

settings.register_profile("ci", deadline=None, max_examples=50, derandomize=True)
settings.load_profile("ci")


def make_image(arr, max_value=255) -> ImageBuffer:
    return ImageBuffer.from_array(np.asarray(arr, dtype=np.uint8), max_value=max_value)


def random_image(rng: np.random.Generator, h: int, w: int, c: int = 3,
                 lo: int = 0, hi: int = 255) -> ImageBuffer:
    return make_image(rng.integers(lo, hi + 1, size=(h, w, c), dtype=np.uint8))


def make_mask(arr) -> MaskBuffer:
    return MaskBuffer.from_array(np.asarray(arr, dtype=np.uint8))


# ---------------------------------------------------------------------------
# Stub HTTP endpoint
# ---------------------------------------------------------------------------


class _StubHandler(http.server.BaseHTTPRequestHandler):
    def log_message(self, *args):
        pass

    def _reply(self, status: int, payload) -> None:
        body = json.dumps(payload).encode("utf-8") if not isinstance(payload, bytes) \
            else payload
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        stub = self.server.stub
        with stub.lock:
            stub.calls.setdefault(("GET", self.path), 0)
            stub.calls[("GET", self.path)] += 1
        route = stub.routes.get(("GET", self.path))
        if route is None:
            self._reply(404, {"error": "no such route"})
            return
        status, payload = route({}, dict(self.headers))
        self._reply(status, payload)

    def do_POST(self):
        stub = self.server.stub
        length = int(self.headers.get("Content-Length", "0"))
        raw = self.rfile.read(length)
        try:
            body = json.loads(raw) if raw else {}
        except json.JSONDecodeError:
            body = {}
        with stub.lock:
            stub.calls.setdefault(("POST", self.path), 0)
            stub.calls[("POST", self.path)] += 1
        route = stub.routes.get(("POST", self.path))
        if route is None:
            self._reply(404, {"error": "no such route"})
            return
        status, payload = route(body, dict(self.headers))
        self._reply(status, payload)


class StubEndpoint:
    """Tiny threaded HTTP server; tests register per-route callables.

    Route callables take (body, headers) and return (status, payload).
    Call counts are tracked per (method, path).
    """

    def __init__(self):
        self.routes = {}
        self.calls = {}
        self.lock = threading.Lock()
        self._server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), _StubHandler)
        self._server.stub = self
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        self.url = f"http://127.0.0.1:{self._server.server_address[1]}"
        self.route("GET", "/v1/health", lambda body, hdr: (200, {"status": "ok"}))

    def route(self, method: str, path: str, fn) -> None:
        self.routes[(method, path)] = fn

    def call_count(self, method: str, path: str) -> int:
        with self.lock:
            return self.calls.get((method, path), 0)

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()


@pytest.fixture
def stub_endpoint():
    stub = StubEndpoint()
    yield stub
    stub.close()


# ---------------------------------------------------------------------------
# Acceptance-criteria reporting
# ---------------------------------------------------------------------------

_CRITERIA: list[tuple[str, bool, float, str]] = []


@contextmanager
def criterion(name: str, budget_seconds: float):
    """Record one acceptance criterion: outcome, runtime, runtime budget."""
    t0 = perf_counter()
    try:
        yield
    except BaseException:
        _CRITERIA.append((name, False, perf_counter() - t0, ""))
        print(f"FAIL {name} ({perf_counter() - t0:.2f}s)")
        raise
    elapsed = perf_counter() - t0
    ok = elapsed < budget_seconds
    _CRITERIA.append((name, ok, elapsed, f"budget {budget_seconds:.0f}s"))
    print(f"{'PASS' if ok else 'FAIL'} {name} ({elapsed:.2f}s, budget {budget_seconds:.0f}s)")
    assert ok, f"{name} exceeded its runtime budget: {elapsed:.2f}s >= {budget_seconds}s"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, ok, elapsed, detail in _CRITERIA:
        suffix = f" [{detail}]" if detail else ""
        terminalreporter.write_line(
            f"{'PASS' if ok else 'FAIL'}: {name} ({elapsed:.2f}s){suffix}"
        )
