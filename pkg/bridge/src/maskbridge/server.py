"""Transports: newline-delimited JSON over stdio, or HTTP POST /expert.

A single malformed request produces an error object on the same channel;
the serving loop itself never dies because of one bad request.
"""

from __future__ import annotations

import json
import sys
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import IO

from .config import RequestProblem


class BridgeServer:
    def __init__(self, expert) -> None:
        self._expert = expert

    def handle_payload(self, payload: object) -> dict:
        rid = payload.get("id") if isinstance(payload, dict) else None
        if not isinstance(rid, str):
            rid = None
        try:
            if not isinstance(payload, dict):
                raise RequestProblem("request must be a JSON object")
            return self._expert.answer(payload)
        except RequestProblem as exc:
            return {"id": rid, "error": str(exc)}
        except Exception as exc:  # bad request must not kill the transport
            return {"id": rid, "error": f"internal error: {exc}"}

    def handle_line(self, line: str) -> dict:
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as exc:
            return {"id": None, "error": f"request is not valid JSON: {exc}"}
        return self.handle_payload(payload)

    def serve_stdio(self, stdin: IO[str] | None = None, stdout: IO[str] | None = None) -> None:
        """Answer one JSON object per input line until EOF."""
        stdin = stdin if stdin is not None else sys.stdin
        stdout = stdout if stdout is not None else sys.stdout
        for line in stdin:
            if not line.strip():
                continue
            stdout.write(json.dumps(self.handle_line(line)))
            stdout.write("\n")
            stdout.flush()


def make_http_server(
    server: BridgeServer, host: str = "127.0.0.1", port: int = 0
) -> ThreadingHTTPServer:
    """Build (without starting) an HTTP server exposing POST /expert."""

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self) -> None:  # noqa: N802 - http.server API
            if self.path.rstrip("/") != "/expert":
                self.send_error(404, "only POST /expert is served")
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
            except ValueError:
                length = 0
            body = self.rfile.read(length)
            try:
                payload = json.loads(body)
            except json.JSONDecodeError as exc:
                response = {"id": None, "error": f"request is not valid JSON: {exc}"}
            else:
                response = server.handle_payload(payload)
            data = json.dumps(response).encode("utf-8")
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def log_message(self, *_args) -> None:
            pass  # diagnostics would corrupt scripted stdout/stderr use

    return ThreadingHTTPServer((host, port), Handler)
