"""HTTP facade over the store.

    POST /write            line-protocol body, unstamped lines get now()
    GET  /query            structured query -> JSON frames or CSV
    GET  /health           counters, storage stats, delivery, alerts
    *    /alerts[/id]      alert-rule CRUD (JSON documents)
    *    /dashboards[/id]  dashboard-layout CRUD (JSON documents)
    GET  /ui/...           static dashboard assets when configured

Every non-2xx response body is a JSON ApiError. An optional shared bearer
token can be required for exposed deployments; by default the API is open
as on a trusted LAN.
"""

from __future__ import annotations

import json
import logging
import threading
import time
import uuid
from dataclasses import dataclass
from datetime import datetime, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qsl, urlparse

from .alerts import AlertEngine, AlertRule, RuleStore
from .errors import DiskFull, ValidationError
from .storage import SeriesQuery, Store
from .wire import ParseError, parse_lines

logger = logging.getLogger(__name__)

MAX_WRITE_BODY = 1 << 20  # 1 MiB


@dataclass
class ApiError(Exception):
    status: int
    code: str
    message: str
    line: int | None = None
    column: int | None = None

    def body(self) -> bytes:
        doc = {"status": self.status, "code": self.code, "message": self.message}
        if self.line is not None:
            doc["line"] = self.line
        if self.column is not None:
            doc["column"] = self.column
        return json.dumps(doc).encode("utf-8")


def parse_time(raw: str) -> int:
    """Accept integer epoch nanoseconds or an RFC3339 timestamp."""
    raw = raw.strip()
    try:
        return int(raw)
    except ValueError:
        pass
    text = raw[:-1] + "+00:00" if raw.endswith("Z") else raw
    try:
        dt = datetime.fromisoformat(text)
    except ValueError:
        raise ApiError(400, "bad_time", f"cannot parse time {raw!r}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp() * 1e9)


def query_from_params(params: dict[str, str]) -> SeriesQuery:
    if "measurement" not in params:
        raise ApiError(400, "bad_query", "measurement parameter is required")
    if "start" not in params or "end" not in params:
        raise ApiError(400, "bad_query", "start and end parameters are required")
    tags = {
        key[len("tag."):]: value
        for key, value in params.items()
        if key.startswith("tag.")
    }
    fields = params.get("field")
    q = SeriesQuery(
        measurement=params["measurement"],
        tags=tags,
        fields=fields.split(",") if fields else None,
        start_ns=parse_time(params["start"]),
        end_ns=parse_time(params["end"]),
        agg=params.get("agg") or None,
        bucket_s=float(params["bucket_s"]) if params.get("bucket_s") else None,
        limit=int(params["limit"]) if params.get("limit") else None,
    )
    try:
        q.validate()
    except ValidationError as exc:
        raise ApiError(400, "bad_query", str(exc)) from None
    return q


class DashboardStore:
    """Dashboard layouts persist next to alert rules in the meta area."""

    def __init__(self, store: Store):
        self._store = store
        self._lock = threading.Lock()

    def list(self) -> dict[str, dict]:
        return self._store.load_meta("dashboards") or {}

    def get(self, dash_id: str) -> dict | None:
        return self.list().get(dash_id)

    def put(self, dash_id: str, doc: dict):
        self._validate(doc)
        with self._lock:
            docs = self._store.load_meta("dashboards") or {}
            docs[dash_id] = doc
            self._store.save_meta("dashboards", docs)

    def delete(self, dash_id: str) -> bool:
        with self._lock:
            docs = self._store.load_meta("dashboards") or {}
            if dash_id not in docs:
                return False
            del docs[dash_id]
            self._store.save_meta("dashboards", docs)
            return True

    @staticmethod
    def _validate(doc: dict):
        if not isinstance(doc.get("name"), str) or not doc["name"]:
            raise ValidationError("dashboard needs a name")
        panels = doc.get("panels")
        if not isinstance(panels, list):
            raise ValidationError("dashboard needs a panels list")
        for panel in panels:
            if not isinstance(panel.get("title"), str):
                raise ValidationError("panel needs a title")
            queries = panel.get("queries")
            if not isinstance(queries, list) or not queries:
                raise ValidationError("panel needs at least one query")
            for q in queries:
                if not q.get("measurement"):
                    raise ValidationError("panel query needs a measurement")
            refresh = panel.get("refresh_s", 20)
            if not isinstance(refresh, (int, float)) or refresh <= 0:
                raise ValidationError("panel refresh_s must be positive")


class Api:
    """Shared state behind the handler; one instance per served store."""

    def __init__(
        self,
        store: Store,
        rules: RuleStore | None = None,
        alert_engine: AlertEngine | None = None,
        collector=None,
        token: str | None = None,
        ui_dir: str | None = None,
    ):
        self.store = store
        self.rules = rules or RuleStore(store)
        self.alert_engine = alert_engine
        self.collector = collector
        self.dashboards = DashboardStore(store)
        self.token = token
        self.ui_dir = ui_dir
        self.started_ns = time.time_ns()
        self.write_requests = 0
        self.query_requests = 0
        self.points_accepted = 0
        self._lock = threading.Lock()

    # -- handlers ------------------------------------------------------

    def handle_write(self, body: bytes, now_ns: int | None = None):
        if len(body) > MAX_WRITE_BODY:
            raise ApiError(413, "body_too_large", f"body exceeds {MAX_WRITE_BODY} bytes")
        now = time.time_ns() if now_ns is None else now_ns
        try:
            text = body.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ApiError(400, "bad_encoding", str(exc)) from None
        parsed = parse_lines(text)
        points = []
        errors = []
        for lineno, item in parsed:
            if isinstance(item, ParseError):
                errors.append({"line": lineno, "column": item.column, "message": item.reason})
            elif item.timestamp is None:
                points.append(item.with_timestamp(now))
            else:
                points.append(item)
        if errors and not points:
            first = errors[0]
            raise ApiError(
                400, "bad_line", first["message"], line=first["line"], column=first["column"],
            )
        try:
            result = self.store.write(points, now_ns=now)
        except DiskFull as exc:
            raise ApiError(507, "disk_full", str(exc)) from None
        with self._lock:
            self.write_requests += 1
            self.points_accepted += result.accepted
        return result.accepted, errors

    def handle_query(self, params: dict[str, str]):
        q = query_from_params(params)
        frames = self.store.query(q)
        with self._lock:
            self.query_requests += 1
        return frames

    def handle_health(self) -> dict:
        stats = self.store.stats()
        newest = self.store.time_range()
        doc = {
            "uptime_s": (time.time_ns() - self.started_ns) / 1e9,
            "write_requests": self.write_requests,
            "query_requests": self.query_requests,
            "points_accepted": self.points_accepted,
            "storage": stats,
            "newest_ns": newest[1] if newest else None,
            "delivery": {},
            "active_alerts": 0,
            "alert_states": {},
        }
        if self.collector is not None:
            doc["delivery"] = self.collector.efficiency_snapshot()
            doc["collector_healthy"] = self.collector.healthy
        if self.alert_engine is not None:
            doc["active_alerts"] = self.alert_engine.active_count()
            doc["alert_states"] = self.alert_engine.rule_states()
        return doc

    # -- alert rule CRUD -------------------------------------------------

    def alerts_list(self) -> list[dict]:
        states = self.alert_engine.rule_states() if self.alert_engine else {}
        out = []
        for rule in self.rules.list():
            doc = rule.to_doc()
            doc["runtime"] = states.get(rule.id, {"state": "none"})
            out.append(doc)
        return out

    def alerts_create(self, doc: dict) -> str:
        if "id" not in doc or not doc["id"]:
            doc["id"] = uuid.uuid4().hex[:12]
        try:
            rule = AlertRule.from_doc(doc)
            self.rules.put(rule)
        except ValidationError as exc:
            raise ApiError(400, "bad_rule", str(exc)) from None
        return rule.id

    def alerts_get(self, rule_id: str) -> dict:
        rule = self.rules.get(rule_id)
        if rule is None:
            raise ApiError(404, "unknown_rule", f"no rule {rule_id!r}")
        doc = rule.to_doc()
        states = self.alert_engine.rule_states() if self.alert_engine else {}
        doc["runtime"] = states.get(rule_id, {"state": "none"})
        return doc

    def alerts_update(self, rule_id: str, doc: dict):
        if self.rules.get(rule_id) is None:
            raise ApiError(404, "unknown_rule", f"no rule {rule_id!r}")
        doc["id"] = rule_id
        try:
            self.rules.put(AlertRule.from_doc(doc))
        except ValidationError as exc:
            raise ApiError(400, "bad_rule", str(exc)) from None

    def alerts_delete(self, rule_id: str):
        if not self.rules.delete(rule_id):
            raise ApiError(404, "unknown_rule", f"no rule {rule_id!r}")


def frames_to_json(frames) -> bytes:
    doc = {
        "frames": [
            {
                "measurement": f.key.measurement,
                "tags": f.key.tag_dict(),
                "field": f.key.field,
                "unit": f.unit,
                "times": f.timestamps,
                "values": f.values,
            }
            for f in frames
        ]
    }
    return json.dumps(doc).encode("utf-8")


def frames_to_csv(frames) -> bytes:
    lines = []
    if len(frames) <= 1:
        lines.append("time,value")
        for f in frames:
            lines.extend(f"{t},{v!r}" for t, v in zip(f.timestamps, f.values))
    else:
        lines.append("series,time,value")
        for f in frames:
            name = f.key.canonical()
            lines.extend(f"{name},{t},{v!r}" for t, v in zip(f.timestamps, f.values))
    return ("\n".join(lines) + "\n").encode("utf-8")


_MIME = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".svg": "image/svg+xml",
    ".json": "application/json",
    ".map": "application/json",
}


class _Handler(BaseHTTPRequestHandler):
    api: Api  # set by make_server
    protocol_version = "HTTP/1.1"

    # -- plumbing --------------------------------------------------------

    def log_message(self, fmt, *args):
        logger.debug("%s %s", self.address_string(), fmt % args)

    def _send(self, status: int, body: bytes, content_type="application/json"):
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        if body:
            self.wfile.write(body)

    def _send_error(self, err: ApiError):
        self._send(err.status, err.body())

    def _read_body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        if length > MAX_WRITE_BODY:
            # drain enough to keep the connection sane, then reject
            self.rfile.read(min(length, MAX_WRITE_BODY + 1))
            raise ApiError(413, "body_too_large", f"body exceeds {MAX_WRITE_BODY} bytes")
        return self.rfile.read(length) if length else b""

    def _check_auth(self):
        if self.api.token is None:
            return
        header = self.headers.get("Authorization", "")
        if header != f"Bearer {self.api.token}":
            raise ApiError(401, "unauthorized", "missing or invalid bearer token")

    def _json_body(self) -> dict:
        try:
            doc = json.loads(self._read_body().decode("utf-8") or "{}")
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ApiError(400, "bad_json", str(exc)) from None
        if not isinstance(doc, dict):
            raise ApiError(400, "bad_json", "expected a JSON object")
        return doc

    # -- routing -----------------------------------------------------------

    def _route(self, method: str):
        url = urlparse(self.path)
        parts = [p for p in url.path.split("/") if p]
        params = dict(parse_qsl(url.query, keep_blank_values=True))
        try:
            if parts[:1] == ["ui"] or url.path == "/":
                if method != "GET":
                    raise ApiError(405, "method_not_allowed", "static assets are GET-only")
                return self._serve_static(parts[1:])
            self._check_auth()
            handler = getattr(self, f"_do_{method}_{parts[0] if parts else ''}", None)
            if handler is None:
                raise ApiError(404, "not_found", f"no route {method} {url.path}")
            handler(parts[1:], params)
        except ApiError as exc:
            self._send_error(exc)
        except BrokenPipeError:
            pass
        except Exception as exc:
            logger.exception("unhandled API error")
            self._send_error(ApiError(500, "internal", str(exc)))

    def do_GET(self):
        self._route("GET")

    def do_POST(self):
        self._route("POST")

    def do_PUT(self):
        self._route("PUT")

    def do_DELETE(self):
        self._route("DELETE")

    # -- routes ------------------------------------------------------------

    def _do_POST_write(self, rest, params):
        accepted, errors = self.api.handle_write(self._read_body())
        if errors:
            body = json.dumps({"accepted": accepted, "errors": errors}).encode()
            self._send(200, body)
        else:
            self.send_response(204)
            self.send_header("X-Accepted-Count", str(accepted))
            self.send_header("Content-Length", "0")
            self.end_headers()

    def _do_GET_query(self, rest, params):
        frames = self.api.handle_query(params)
        accept = self.headers.get("Accept", "")
        if "text/csv" in accept or params.get("format") == "csv":
            self._send(200, frames_to_csv(frames), "text/csv; charset=utf-8")
        else:
            self._send(200, frames_to_json(frames))

    def _do_GET_health(self, rest, params):
        self._send(200, json.dumps(self.api.handle_health()).encode())

    def _do_GET_alerts(self, rest, params):
        if rest:
            self._send(200, json.dumps(self.api.alerts_get(rest[0])).encode())
        else:
            self._send(200, json.dumps(self.api.alerts_list()).encode())

    def _do_POST_alerts(self, rest, params):
        if rest:
            raise ApiError(405, "method_not_allowed", "POST to /alerts to create")
        rule_id = self.api.alerts_create(self._json_body())
        self._send(201, json.dumps({"id": rule_id}).encode())

    def _do_PUT_alerts(self, rest, params):
        if not rest:
            raise ApiError(405, "method_not_allowed", "PUT needs /alerts/<id>")
        self.api.alerts_update(rest[0], self._json_body())
        self._send(200, b'{"ok": true}')

    def _do_DELETE_alerts(self, rest, params):
        if not rest:
            raise ApiError(405, "method_not_allowed", "DELETE needs /alerts/<id>")
        self.api.alerts_delete(rest[0])
        self._send(200, b'{"ok": true}')

    def _do_GET_dashboards(self, rest, params):
        if rest:
            doc = self.api.dashboards.get(rest[0])
            if doc is None:
                raise ApiError(404, "unknown_dashboard", f"no dashboard {rest[0]!r}")
            self._send(200, json.dumps(doc).encode())
        else:
            self._send(200, json.dumps(self.api.dashboards.list()).encode())

    def _do_POST_dashboards(self, rest, params):
        doc = self._json_body()
        dash_id = doc.get("id") or uuid.uuid4().hex[:12]
        doc["id"] = dash_id
        try:
            self.api.dashboards.put(dash_id, doc)
        except ValidationError as exc:
            raise ApiError(400, "bad_dashboard", str(exc)) from None
        self._send(201, json.dumps({"id": dash_id}).encode())

    def _do_PUT_dashboards(self, rest, params):
        if not rest:
            raise ApiError(405, "method_not_allowed", "PUT needs /dashboards/<id>")
        doc = self._json_body()
        doc["id"] = rest[0]
        try:
            self.api.dashboards.put(rest[0], doc)
        except ValidationError as exc:
            raise ApiError(400, "bad_dashboard", str(exc)) from None
        self._send(200, b'{"ok": true}')

    def _do_DELETE_dashboards(self, rest, params):
        if not rest or not self.api.dashboards.delete(rest[0]):
            raise ApiError(404, "unknown_dashboard", "no such dashboard")
        self._send(200, b'{"ok": true}')

    # -- static UI -----------------------------------------------------------

    def _serve_static(self, parts: list[str]):
        import os

        if self.api.ui_dir is None:
            raise ApiError(404, "no_ui", "dashboard assets are not configured")
        base = os.path.abspath(self.api.ui_dir)
        rel = "/".join(parts) or "index.html"
        path = os.path.normpath(os.path.join(base, rel))
        if not path.startswith(base + os.sep):
            raise ApiError(404, "not_found", "no such asset")
        if not os.path.isfile(path):
            raise ApiError(404, "not_found", f"no asset {rel!r}")
        ext = os.path.splitext(path)[1]
        with open(path, "rb") as fh:
            self._send(200, fh.read(), _MIME.get(ext, "application/octet-stream"))


def make_server(api: Api, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    handler = type("BoundHandler", (_Handler,), {"api": api})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server


class ApiServer:
    """Server + thread wrapper used by the CLI and tests."""

    def __init__(self, api: Api, host: str = "127.0.0.1", port: int = 0):
        self.api = api
        self.server = make_server(api, host, port)
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self.server.server_address[1]

    @property
    def url(self) -> str:
        host = self.server.server_address[0]
        return f"http://{host}:{self.port}"

    def start(self):
        self._thread = threading.Thread(
            target=self.server.serve_forever, kwargs={"poll_interval": 0.1},
            daemon=True, name="api-server",
        )
        self._thread.start()

    def stop(self):
        self.server.shutdown()
        self.server.server_close()
        if self._thread:
            self._thread.join(timeout=5)
