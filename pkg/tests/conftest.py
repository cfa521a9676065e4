from __future__ import annotations

import math

import pytest

from rewardloop.track import build_track, default_track


def square_waypoints(side: float = 100.0, per_side: int = 2):
    """Counter-clockwise square, ``per_side`` waypoints on each side."""
    pts = []
    corners = [(0.0, 0.0), (side, 0.0), (side, side), (0.0, side)]
    for k in range(4):
        ax, ay = corners[k]
        bx, by = corners[(k + 1) % 4]
        for j in range(per_side):
            t = j / per_side
            pts.append((ax + (bx - ax) * t, ay + (by - ay) * t))
    return pts


def polygon_waypoints(n: int, circumference: float):
    r = circumference / (2 * n * math.sin(math.pi / n))
    return [(r * math.cos(2 * math.pi * k / n), r * math.sin(2 * math.pi * k / n))
            for k in range(n)]


@pytest.fixture(scope="session")
def square():
    return build_track(square_waypoints(), half_width=6.0, goal_s=0.0)


@pytest.fixture(scope="session")
def track():
    return default_track()


import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer


def chat_reply(content: str) -> dict:
    return {"choices": [{"message": {"role": "assistant", "content": content}}]}


class MockLmServer:
    """Local chat-completions endpoint replaying scripted responses.

    Each response is ``(status, body)``; ``body`` is a dict (sent as JSON) or
    raw text.  The last response repeats once the script runs out.
    """

    def __init__(self, responses):
        self.responses = list(responses)
        self.requests: list[dict] = []
        self.headers: list[dict] = []
        server = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                server.requests.append(json.loads(self.rfile.read(length)))
                server.headers.append(dict(self.headers))
                i = min(len(server.requests), len(server.responses)) - 1
                status, body = server.responses[i]
                data = (json.dumps(body) if isinstance(body, dict) else body).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.httpd.serve_forever, args=(0.01,), daemon=True)

    @property
    def endpoint(self) -> str:
        return f"http://127.0.0.1:{self.httpd.server_address[1]}/v1"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def api_key(monkeypatch):
    monkeypatch.setenv("REWARD_LOOP_API_KEY", "test-key")
    return "test-key"


# One "criterion N: PASS|FAIL" line per acceptance criterion, repeated in the
# terminal summary so it is visible without ``-s``.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: (int(s.split()[1].rstrip("abc:")),
                                                            s)):
            terminalreporter.write_line(line)
