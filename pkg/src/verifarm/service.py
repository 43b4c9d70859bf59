"""HTTP+JSON front end for a :class:`~verifarm.store.Fabric`, and the matching
client.

Routes::

    POST /queue/enqueue            TaskSpec                 -> {"enqueued_at"}
    POST /queue/dequeue            {"worker"}               -> {"entry", "receipt"} | {"exhausted"} | {"entry": null}
    POST /queue/delete             {"id", "receipt"}        -> {"report"}
    GET  /queue/exists/{id}                                 -> {"exists"}
    GET  /queue/snapshot                                    -> {"rows"}
    PUT  /blobs/{container}/{name} raw bytes                -> BlobRef
    GET  /blobs/{container}/{name}[?hash=H]                 -> raw bytes
    POST /topics/{client}/publish  ResultRecord             -> {"length"}
    GET  /topics/{client}?cursor=N                          -> {"records", "next_cursor"}
    POST /telemetry                TelemetryRecord          -> {}
    GET  /telemetry/stats                                   -> WaitStats
    GET  /telemetry?task=ID                                 -> {"records"}
    PUT  /versions/{id}            zip bytes                -> VersionPackage
    GET  /versions/{id}                                     -> zip bytes
    GET  /versions                                          -> {"versions"}
    GET  /monitor                                           -> MonitorSnapshot
    GET  /metrics                                           -> {"requests": {route: count}}

Errors come back as ``{"error": kind, "detail": text}`` with 400 (bad
request), 404 (not found), 409 (duplicate task, hash mismatch) or 500.
"""

from __future__ import annotations

import json
import logging
import re
import threading
import time
import urllib.error
import urllib.parse
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable

from verifarm.model import BlobRef, ResultRecord, TaskSpec, TelemetryRecord, WaitStats
from verifarm.queue import (
    DeleteReport,
    Dequeued,
    DuplicateTask,
    Exhausted,
    InvalidTask,
    QueueEntry,
    SnapshotRow,
)
from verifarm.store import (
    Fabric,
    HashMismatch,
    MalformedArchive,
    MonitorSnapshot,
    NotFound,
    VersionPackage,
)

log = logging.getLogger(__name__)


class ServiceError(Exception):
    def __init__(self, status: int, kind: str, detail: str):
        super().__init__(f"{status} {kind}: {detail}")
        self.status = status
        self.kind = kind
        self.detail = detail


class Unreachable(ServiceError):
    def __init__(self, detail: str):
        super().__init__(0, "unreachable", detail)


Route = tuple[str, re.Pattern, Callable[..., Any]]


class _Handler(BaseHTTPRequestHandler):
    server: FabricServer
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # noqa: D401 - silence default stderr logging
        log.debug("%s %s", self.address_string(), fmt % args)

    def _dispatch(self, method: str) -> None:
        parsed = urllib.parse.urlsplit(self.path)
        query = dict(urllib.parse.parse_qsl(parsed.query))
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        for verb, pattern, fn in self.server.routes:
            if verb != method:
                continue
            m = pattern.fullmatch(parsed.path)
            if m is None:
                continue
            self.server.fabric.requests.incr(f"{verb} {pattern.pattern}")
            try:
                result = fn(body=body, query=query, **{k: urllib.parse.unquote(v) for k, v in m.groupdict().items()})
            except ServiceError as exc:
                return self._send_json(exc.status, {"error": exc.kind, "detail": exc.detail})
            except (DuplicateTask, HashMismatch) as exc:
                return self._send_json(409, {"error": type(exc).__name__, "detail": str(exc)})
            except NotFound as exc:
                return self._send_json(404, {"error": "NotFound", "detail": str(exc)})
            except (InvalidTask, MalformedArchive, ValueError, KeyError, TypeError) as exc:
                return self._send_json(400, {"error": type(exc).__name__, "detail": str(exc)})
            except Exception as exc:  # noqa: BLE001 - report, keep serving
                log.exception("handler failed")
                return self._send_json(500, {"error": type(exc).__name__, "detail": str(exc)})
            if isinstance(result, (bytes, bytearray)):
                return self._send(200, bytes(result), "application/octet-stream")
            return self._send_json(200, result)
        self._send_json(404, {"error": "NoRoute", "detail": f"{method} {parsed.path}"})

    def _send_json(self, status: int, obj: Any) -> None:
        self._send(status, json.dumps(obj).encode("utf-8"), "application/json")

    def _send(self, status: int, data: bytes, ctype: str) -> None:
        self.send_response(status)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    def do_PUT(self):
        self._dispatch("PUT")


def _json(body: bytes) -> Any:
    return json.loads(body.decode("utf-8")) if body else {}


class FabricServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, fabric: Fabric, address: tuple[str, int] = ("127.0.0.1", 0)):
        self.fabric = fabric
        self.routes = self._build_routes()
        super().__init__(address, _Handler)

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name="fabric-http", daemon=True)
        t.start()
        return t

    def _build_routes(self) -> list[Route]:
        f = self.fabric
        seg = r"[^/]+"
        path = r".+"

        def enqueue(body, query):
            return {"enqueued_at": f.enqueue(TaskSpec.from_json(_json(body)))}

        def dequeue(body, query):
            got = f.dequeue(_json(body).get("worker"))
            if isinstance(got, Dequeued):
                return {"entry": got.entry.to_json(), "receipt": got.receipt}
            if isinstance(got, Exhausted):
                return {"exhausted": got.entry.to_json()}
            return {"entry": None}

        def delete(body, query):
            d = _json(body)
            return {"report": f.delete(d["id"], d["receipt"]).value}

        def exists(body, query, id):
            return {"exists": f.exists(id)}

        def snapshot(body, query):
            return {"rows": [r.to_json() for r in f.snapshot()]}

        def put_blob(body, query, container, name):
            return f.put_blob(container, name, body).to_json()

        def get_blob(body, query, container, name):
            expected = query.get("hash")
            if expected:
                return f.get_blob(BlobRef(container, name, expected))
            return f.blobs.read(container, name)

        def publish(body, query, client):
            return {"length": f.publish(client, ResultRecord.from_json(_json(body)))}

        def poll(body, query, client):
            records, cursor = f.poll(client, int(query.get("cursor", 0)))
            return {"records": [r.to_json() for r in records], "next_cursor": cursor}

        def telemetry(body, query):
            f.record_telemetry(TelemetryRecord.from_json(_json(body)))
            return {}

        def telemetry_query(body, query):
            return {"records": [r.to_json() for r in f.query_telemetry(query["task"])]}

        def stats(body, query):
            return f.telemetry_stats().to_json()

        def put_version(body, query, id):
            return f.upload_version(id, body).to_json()

        def get_version(body, query, id):
            data = f.download_version(id)
            if data is None:
                raise NotFound(f"version {id}")
            return data

        def list_versions(body, query):
            return {"versions": f.list_versions()}

        def monitor(body, query):
            return f.monitor_snapshot().to_json()

        def metrics(body, query):
            return {"requests": dict(f.requests.counts)}

        table = [
            ("POST", "/queue/enqueue", enqueue),
            ("POST", "/queue/dequeue", dequeue),
            ("POST", "/queue/delete", delete),
            ("GET", f"/queue/exists/(?P<id>{seg})", exists),
            ("GET", "/queue/snapshot", snapshot),
            ("PUT", f"/blobs/(?P<container>{seg})/(?P<name>{path})", put_blob),
            ("GET", f"/blobs/(?P<container>{seg})/(?P<name>{path})", get_blob),
            ("POST", f"/topics/(?P<client>{seg})/publish", publish),
            ("GET", f"/topics/(?P<client>{seg})", poll),
            ("POST", "/telemetry", telemetry),
            ("GET", "/telemetry/stats", stats),
            ("GET", "/telemetry", telemetry_query),
            ("PUT", f"/versions/(?P<id>{seg})", put_version),
            ("GET", f"/versions/(?P<id>{seg})", get_version),
            ("GET", "/versions", list_versions),
            ("GET", "/monitor", monitor),
            ("GET", "/metrics", metrics),
        ]
        return [(verb, re.compile(pat), fn) for verb, pat, fn in table]


class FabricClient:
    """Talks to a fabric server; method-compatible with :class:`Fabric`."""

    def __init__(self, url: str, timeout: float = 30.0):
        self.url = url.rstrip("/")
        self.timeout = timeout

    def _request(self, method: str, path: str, data: bytes | None = None,
                 ctype: str = "application/json") -> bytes:
        req = urllib.request.Request(self.url + path, data=data, method=method)
        if data is not None:
            req.add_header("Content-Type", ctype)
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return resp.read()
        except urllib.error.HTTPError as exc:
            payload = exc.read()
            try:
                err = json.loads(payload)
            except ValueError:
                err = {"error": "HTTPError", "detail": payload.decode("utf-8", "replace")}
            kind, detail = err.get("error", "HTTPError"), err.get("detail", "")
            if exc.code == 404:
                raise NotFound(detail) from None
            if exc.code == 409 and kind == "DuplicateTask":
                raise DuplicateTask(detail) from None
            if exc.code == 409 and kind == "HashMismatch":
                raise HashMismatch(detail) from None
            if exc.code == 400 and kind == "InvalidTask":
                raise InvalidTask(detail) from None
            if exc.code == 400 and kind == "MalformedArchive":
                raise MalformedArchive(detail) from None
            raise ServiceError(exc.code, kind, detail) from None
        except (urllib.error.URLError, ConnectionError, TimeoutError) as exc:
            raise Unreachable(str(getattr(exc, "reason", exc))) from None

    def _get(self, path: str) -> Any:
        return json.loads(self._request("GET", path))

    def _post(self, path: str, obj: Any) -> Any:
        return json.loads(self._request("POST", path, json.dumps(obj).encode("utf-8")))

    # queue
    def enqueue(self, task: TaskSpec) -> int:
        return self._post("/queue/enqueue", task.to_json())["enqueued_at"]

    def dequeue(self, worker: str | None = None) -> Dequeued | Exhausted | None:
        d = self._post("/queue/dequeue", {"worker": worker})
        if d.get("exhausted"):
            return Exhausted(QueueEntry.from_json(d["exhausted"]))
        if d.get("entry"):
            return Dequeued(QueueEntry.from_json(d["entry"]), d["receipt"])
        return None

    def delete(self, task_id: str, receipt: str) -> DeleteReport:
        return DeleteReport(self._post("/queue/delete", {"id": task_id, "receipt": receipt})["report"])

    def exists(self, task_id: str) -> bool:
        return self._get(f"/queue/exists/{urllib.parse.quote(task_id)}")["exists"]

    def snapshot(self) -> list[SnapshotRow]:
        return [SnapshotRow.from_json(r) for r in self._get("/queue/snapshot")["rows"]]

    # blobs
    def put_blob(self, container: str, name: str, data: bytes) -> BlobRef:
        raw = self._request("PUT", f"/blobs/{container}/{name}", data, "application/octet-stream")
        return BlobRef.from_json(json.loads(raw))

    def get_blob(self, ref: BlobRef) -> bytes:
        q = urllib.parse.urlencode({"hash": ref.content_hash})
        return self._request("GET", f"/blobs/{ref.container}/{ref.name}?{q}")

    # results
    def publish(self, topic: str, record: ResultRecord) -> int:
        return self._post(f"/topics/{topic}/publish", record.to_json())["length"]

    def poll(self, topic: str, cursor: int = 0) -> tuple[list[ResultRecord], int]:
        d = self._get(f"/topics/{topic}?cursor={cursor}")
        return [ResultRecord.from_json(r) for r in d["records"]], d["next_cursor"]

    def record_telemetry(self, rec: TelemetryRecord) -> None:
        self._post("/telemetry", rec.to_json())

    def telemetry_stats(self) -> WaitStats:
        return WaitStats(**self._get("/telemetry/stats"))

    def query_telemetry(self, task: str) -> list[TelemetryRecord]:
        q = urllib.parse.urlencode({"task": task})
        return [TelemetryRecord.from_json(r) for r in self._get(f"/telemetry?{q}")["records"]]

    # versions
    def upload_version(self, version_id: str, data: bytes) -> VersionPackage:
        raw = self._request("PUT", f"/versions/{version_id}", data, "application/zip")
        return VersionPackage.from_json(json.loads(raw))

    def download_version(self, version_id: str) -> bytes | None:
        try:
            return self._request("GET", f"/versions/{version_id}")
        except NotFound:
            return None

    def list_versions(self) -> list[str]:
        return self._get("/versions")["versions"]

    def monitor_snapshot(self) -> MonitorSnapshot:
        return MonitorSnapshot.from_json(self._get("/monitor"))

    def metrics(self) -> dict[str, int]:
        return self._get("/metrics")["requests"]

    def wait_ready(self, timeout: float = 10.0) -> None:
        deadline = time.monotonic() + timeout
        while True:
            try:
                self._get("/versions")
                return
            except Unreachable:
                if time.monotonic() > deadline:
                    raise
                time.sleep(0.05)
