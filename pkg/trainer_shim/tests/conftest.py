"""Fixture reward service: canned /v1/score responses, no primary-code imports."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

# Canned composites per known chunk id; breakdowns mirror the service schema.
CANNED_REWARDS = {
    "alpha-0000": [0.7125, 0.4050],
    "alpha-0001": [0.3175],
}


def _breakdown(composite: float) -> dict:
    return {
        "r_uncert": 1.0,
        "r_complete": 0.8,
        "r_consist": 1.0,
        "r_context": 0.5,
        "r_cohere": 1.0,
        "r_ground": composite,  # unused by the shim; composite is what matters
        "composite": composite,
        "no_flow_predicted": False,
        "gold_has_flows": True,
        "grounding_detail": {},
        "flags": [],
    }


class FixtureService:
    def __init__(self):
        self.requests: list[dict] = []
        self.fail_next: list[int] = []  # status codes to emit before behaving
        self._lock = threading.Lock()
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):
                pass

            def _respond(self, status: int, payload: dict) -> None:
                body = json.dumps(payload).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_POST(self):
                if not self.path.endswith("/v1/score"):
                    self._respond(404, {"detail": "unknown endpoint"})
                    return
                length = int(self.headers.get("Content-Length", "0"))
                body = json.loads(self.rfile.read(length))
                with outer._lock:
                    outer.requests.append(body)
                    scripted = outer.fail_next.pop(0) if outer.fail_next else None
                if scripted is not None:
                    self._respond(scripted, {"detail": "scripted failure"})
                    return
                chunk_id = body.get("chunk_id")
                if chunk_id not in CANNED_REWARDS:
                    self._respond(404, {"detail": f"unknown chunk_id '{chunk_id}'"})
                    return
                composites = CANNED_REWARDS[chunk_id][: len(body["completions"])]
                self._respond(
                    200,
                    {
                        "rewards": composites,
                        "breakdowns": [_breakdown(c) for c in composites],
                        "diagnostics": {"group_size": len(composites)},
                    },
                )

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self):
        self._thread.start()
        return self

    def stop(self):
        self._server.shutdown()
        self._server.server_close()


@pytest.fixture
def fixture_service():
    service = FixtureService().start()
    yield service
    service.stop()
