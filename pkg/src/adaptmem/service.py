"""HTTP service exposing sessions, turns, queries and memory inspection.

Endpoints (JSON in, JSON out)::

    POST /sessions                        {"session_id": int?}
    POST /sessions/{id}/turns             {"text", "speaker"?, "timestamp"?, "retrieval_only"?}
    POST /sessions/{id}/query             {"question", "retrieval_only"?}
    GET  /sessions/{id}/memory?granularity=raw|fact|episode

Each request is handled on its own thread; the engine serializes turns
within a session and writes within the store.
"""

from __future__ import annotations

import json
import logging
import re
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlsplit

from .errors import GatewayError, MalformedTimestamp, MemoryEngineError, StorageFailure
from .pipeline import MemoryEngine, Mode
from .types import Granularity, Speaker, TurnRecord, parse_turn_id

logger = logging.getLogger(__name__)

_SESSION_RE = re.compile(r"^/sessions/([0-9]+)/(turns|query|memory)$")
MAX_BODY = 1 << 20


class HttpError(Exception):
    def __init__(self, status: HTTPStatus, message: str):
        super().__init__(message)
        self.status = status


def _mode(body: dict) -> Mode:
    flag = body.get("retrieval_only", False)
    if not isinstance(flag, bool):
        raise HttpError(HTTPStatus.BAD_REQUEST, "'retrieval_only' must be a boolean")
    return Mode.RETRIEVAL_ONLY if flag else Mode.FULL_INFERENCE


def _text(body: dict, key: str) -> str:
    v = body.get(key)
    if not isinstance(v, str) or not v.strip():
        raise HttpError(HTTPStatus.BAD_REQUEST, f"{key!r} must be a non-empty string")
    return v


class MemoryService:
    """Transport-independent request handling, easy to test directly."""

    def __init__(self, engine: MemoryEngine):
        self.engine = engine

    def _session(self, sid: int):
        try:
            return self.engine.session(sid)
        except KeyError:
            raise HttpError(HTTPStatus.NOT_FOUND, f"no session {sid}") from None

    def create_session(self, body: dict) -> dict:
        sid = body.get("session_id")
        if sid is not None and (isinstance(sid, bool) or not isinstance(sid, int) or sid < 0):
            raise HttpError(HTTPStatus.BAD_REQUEST, "'session_id' must be a non-negative integer")
        s = self.engine.open_session(sid)
        return {"session_id": s.id, "window": s.window.to_dict()}

    def post_turn(self, sid: int, body: dict) -> dict:
        s = self._session(sid)
        text = _text(body, "text")
        speaker = body.get("speaker", "user")
        if speaker not in ("user", "assistant"):
            raise HttpError(HTTPStatus.BAD_REQUEST, "'speaker' must be 'user' or 'assistant'")
        ts = body.get("timestamp")
        if ts is not None and not isinstance(ts, str):
            raise HttpError(HTTPStatus.BAD_REQUEST, "'timestamp' must be a string")
        u: TurnRecord | str = text
        if "turn_id" in body:
            try:
                tid = parse_turn_id(body["turn_id"])
            except (MemoryEngineError, TypeError) as exc:
                raise HttpError(HTTPStatus.BAD_REQUEST, str(exc)) from None
            if tid.session != sid:
                raise HttpError(HTTPStatus.BAD_REQUEST, f"turn id belongs to session {tid.session}")
            u = TurnRecord(tid, Speaker(speaker), text, ts)
        try:
            out = self.engine.process_turn(s, u, mode=_mode(body), speaker=Speaker(speaker), timestamp_hint=ts)
        except ValueError as exc:
            raise HttpError(HTTPStatus.CONFLICT, str(exc)) from None
        return out.to_dict()

    def post_query(self, sid: int, body: dict) -> dict:
        s = self._session(sid)
        return self.engine.answer_query(s, _text(body, "question"), mode=_mode(body)).to_dict()

    def get_memory(self, sid: int, query: dict[str, list[str]]) -> dict:
        self._session(sid)
        g = query.get("granularity", [None])[0]
        try:
            gran = Granularity(g) if g else None
        except ValueError:
            raise HttpError(HTTPStatus.BAD_REQUEST, f"unknown granularity {g!r}") from None
        entries = [e for e in self.engine.store.scan(gran) if e.meta.turn_id.session == sid]
        return {"session_id": sid, "entries": [e.to_dict() for e in entries]}

    def dispatch(self, method: str, path: str, body: dict | None) -> tuple[HTTPStatus, dict]:
        parts = urlsplit(path)
        try:
            if parts.path.rstrip("/") == "/sessions":
                if method != "POST":
                    raise HttpError(HTTPStatus.METHOD_NOT_ALLOWED, "use POST")
                return HTTPStatus.CREATED, self.create_session(body or {})
            m = _SESSION_RE.match(parts.path)
            if m is None:
                raise HttpError(HTTPStatus.NOT_FOUND, f"no route for {parts.path}")
            sid, action = int(m.group(1)), m.group(2)
            expected = "GET" if action == "memory" else "POST"
            if method != expected:
                raise HttpError(HTTPStatus.METHOD_NOT_ALLOWED, f"use {expected}")
            if action == "turns":
                return HTTPStatus.OK, self.post_turn(sid, body or {})
            if action == "query":
                return HTTPStatus.OK, self.post_query(sid, body or {})
            return HTTPStatus.OK, self.get_memory(sid, parse_qs(parts.query))
        except HttpError as exc:
            return exc.status, {"error": str(exc)}
        except MalformedTimestamp as exc:
            return HTTPStatus.BAD_REQUEST, {"error": str(exc)}
        except GatewayError as exc:
            return HTTPStatus.BAD_GATEWAY, {"error": f"model backend failed: {exc}"}
        except StorageFailure as exc:
            logger.error("storage failure: %s", exc)
            return HTTPStatus.SERVICE_UNAVAILABLE, {"error": f"storage failure: {exc}"}


def make_handler(service: MemoryService):
    class Handler(BaseHTTPRequestHandler):
        server_version = "adaptmem"

        def log_message(self, fmt, *args):
            logger.info("%s %s", self.address_string(), fmt % args)

        def _send(self, status: HTTPStatus, payload: dict) -> None:
            data = json.dumps(payload, ensure_ascii=False).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def _body(self) -> dict | None:
            n = int(self.headers.get("Content-Length") or 0)
            if n > MAX_BODY:
                raise HttpError(HTTPStatus.REQUEST_ENTITY_TOO_LARGE, "body too large")
            if n == 0:
                return None
            try:
                body = json.loads(self.rfile.read(n))
            except ValueError:
                raise HttpError(HTTPStatus.BAD_REQUEST, "body is not valid JSON") from None
            if not isinstance(body, dict):
                raise HttpError(HTTPStatus.BAD_REQUEST, "body must be a JSON object")
            return body

        def _handle(self, method: str) -> None:
            try:
                body = self._body() if method == "POST" else None
            except HttpError as exc:
                self._send(exc.status, {"error": str(exc)})
                return
            self._send(*service.dispatch(method, self.path, body))

        def do_GET(self):
            self._handle("GET")

        def do_POST(self):
            self._handle("POST")

    return Handler


def make_server(engine: MemoryEngine, host: str = "127.0.0.1", port: int = 8080) -> ThreadingHTTPServer:
    return ThreadingHTTPServer((host, port), make_handler(MemoryService(engine)))
