"""Minimal HTTP+JSON plumbing shared by the local services.

All services here are loopback control-plane sockets; the stdlib threading
server is plenty. Handlers receive (method, path parts, query, body-json)
and return (status, payload). Payloads are serialized with compact,
deterministic json.dumps so responses are byte-stable for identical state.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable, Optional
from urllib.parse import parse_qs, urlparse

Handler = Callable[[str, list[str], dict[str, str], Any], tuple[int, Any]]


class BadRequest(Exception):
    pass


def dumps(payload: Any) -> bytes:
    return json.dumps(payload, separators=(",", ":"), sort_keys=False).encode()


class JsonHttpServer:
    """A threading HTTP server dispatching every request to one handler."""

    def __init__(self, handler: Handler, host: str = "127.0.0.1", port: int = 0) -> None:
        self._handler = handler
        outer = self

        class _Req(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):  # keep test output clean
                pass

            def _dispatch(self, method: str) -> None:
                parsed = urlparse(self.path)
                parts = [p for p in parsed.path.split("/") if p]
                query = {k: v[0] for k, v in parse_qs(parsed.query).items()}
                body = None
                length = int(self.headers.get("Content-Length") or 0)
                raw = self.rfile.read(length) if length else b""
                if raw:
                    try:
                        body = json.loads(raw)
                    except ValueError:
                        self._reply(400, {"error": "malformed JSON body"})
                        return
                try:
                    status, payload = outer._handler(method, parts, query, body)
                except BadRequest as exc:
                    status, payload = 400, {"error": str(exc)}
                except Exception as exc:  # surface, do not kill the thread
                    status, payload = 500, {"error": f"{type(exc).__name__}: {exc}"}
                self._reply(status, payload)

            def _reply(self, status: int, payload: Any) -> None:
                if isinstance(payload, (bytes, bytearray)):
                    data = bytes(payload)
                    ctype = "text/plain"
                else:
                    data = dumps(payload)
                    ctype = "application/json"
                self.send_response(status)
                self.send_header("Content-Type", ctype)
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def do_GET(self):
                self._dispatch("GET")

            def do_POST(self):
                self._dispatch("POST")

            def do_DELETE(self):
                self._dispatch("DELETE")

        self._server = ThreadingHTTPServer((host, port), _Req)
        self._server.daemon_threads = True
        self._thread: Optional[threading.Thread] = None

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "JsonHttpServer":
        self._thread = threading.Thread(
            target=lambda: self._server.serve_forever(poll_interval=0.05), daemon=True
        )
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
