"""HTTP JSON API over the co-synthesis store.

Plain stdlib threading HTTP server: one process, many readers, all
mutations serialized inside the store. The review UI is a separate static
frontend consuming exactly these endpoints, so responses carry permissive
CORS headers.

Routes:
    GET  /queue?state=        item summaries, optionally filtered
    GET  /items/{id}          full item detail
    POST /items/{id}/run      {"backend": name}
    POST /items/{id}/refine   {"seeds": n, "refiner": name}
    POST /items/{id}/decision {"kind", "variant"?, "reason"?, "expect_version"?}
    POST /items/{id}/order    {"occluders": [ids], "expect_version"?}
    POST /items/{id}/annotate {}
    GET  /export?dir=         write annotated pairs, return manifest summary
    GET  /stats
    GET  /blobs/{hash}        PNG bytes
The acting human comes from the X-Actor header (default "anonymous").
"""

from __future__ import annotations

import json
import traceback
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

from .cosynth import (
    CosynthStore,
    IllegalTransition,
    RetriesExhausted,
    VersionConflict,
    stub_annotator,
)


class CosynthService:
    def __init__(
        self,
        store: CosynthStore,
        backends: dict,
        annotator=stub_annotator,
        default_backend: str | None = None,
        default_refiner: str = "identity",
        export_dir: str | Path | None = None,
    ):
        self.store = store
        self.backends = backends
        self.annotator = annotator
        self.default_backend = default_backend or next(iter(backends), None)
        self.default_refiner = default_refiner
        self.export_dir = Path(export_dir) if export_dir else store.root / "export"

    def _backend(self, name: str | None, fallback: str | None):
        key = name or fallback
        if key not in self.backends:
            raise KeyError(f"unknown backend {key!r}; have {sorted(self.backends)}")
        return self.backends[key]

    # one method per route; handlers return (status, payload)

    def queue(self, state: str | None):
        items = self.store.items(state)
        return 200, {"items": [i.summary() for i in items]}

    def item(self, item_id: str):
        return 200, self.store.get(item_id).detail()

    def run(self, item_id: str, body: dict, actor: str):
        backend = self._backend(body.get("backend"), self.default_backend)
        item = self.store.run_initial(item_id, backend, actor=actor)
        return 200, item.detail()

    def refine(self, item_id: str, body: dict, actor: str):
        refiner = self._backend(body.get("refiner"), self.default_refiner)
        item = self.store.refine(item_id, refiner, seeds=int(body.get("seeds", 2)), actor=actor)
        return 200, item.detail()

    def decision(self, item_id: str, body: dict, actor: str):
        expect = body.get("expect_version")
        decision = {k: v for k, v in body.items() if k != "expect_version"}
        item = self.store.decide(item_id, decision, actor=actor, expect_version=expect)
        return 200, item.detail()

    def order(self, item_id: str, body: dict, actor: str):
        decision = {"kind": "correct_order", "occluders": body.get("occluders", [])}
        item = self.store.decide(
            item_id, decision, actor=actor, expect_version=body.get("expect_version")
        )
        return 200, item.detail()

    def annotate(self, item_id: str, actor: str):
        item = self.store.annotate(item_id, self.annotator, actor=actor)
        return 200, item.detail()

    def export(self, directory: str | None):
        target = Path(directory) if directory else self.export_dir
        manifest = self.store.export(target)
        return 200, {
            "directory": str(manifest.directory),
            "pairs": len(manifest.records),
            "records": [r.id for r in manifest.records],
        }

    def stats(self):
        return 200, self.store.stats()


def _make_handler(service: CosynthService):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):  # quiet by default
            pass

        def _send(self, status: int, payload, content_type="application/json"):
            raw = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(raw)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Headers", "Content-Type, X-Actor")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.end_headers()
            self.wfile.write(raw)

        def _error(self, status: int, message: str, **extra):
            self._send(status, {"error": message, **extra})

        def _body(self) -> dict:
            length = int(self.headers.get("Content-Length") or 0)
            if not length:
                return {}
            return json.loads(self.rfile.read(length).decode() or "{}")

        def _actor(self) -> str:
            return self.headers.get("X-Actor", "anonymous")

        def do_OPTIONS(self):
            self._send(204, b"", content_type="text/plain")

        def _dispatch(self, method: str):
            url = urlparse(self.path)
            parts = [p for p in url.path.split("/") if p]
            query = {k: v[0] for k, v in parse_qs(url.query).items()}
            try:
                if method == "GET" and parts == ["queue"]:
                    return self._send(*service.queue(query.get("state")))
                if method == "GET" and parts == ["stats"]:
                    return self._send(*service.stats())
                if method == "GET" and parts == ["export"]:
                    return self._send(*service.export(query.get("dir")))
                if method == "GET" and len(parts) == 2 and parts[0] == "blobs":
                    return self._send(200, service.store.get_blob(parts[1]), content_type="image/png")
                if method == "GET" and len(parts) == 2 and parts[0] == "items":
                    return self._send(*service.item(parts[1]))
                if method == "POST" and len(parts) == 3 and parts[0] == "items":
                    item_id, action = parts[1], parts[2]
                    body = self._body()
                    actor = self._actor()
                    if action == "run":
                        return self._send(*service.run(item_id, body, actor))
                    if action == "refine":
                        return self._send(*service.refine(item_id, body, actor))
                    if action == "decision":
                        return self._send(*service.decision(item_id, body, actor))
                    if action == "order":
                        return self._send(*service.order(item_id, body, actor))
                    if action == "annotate":
                        return self._send(*service.annotate(item_id, actor))
                return self._error(404, f"no route for {method} {url.path}")
            except KeyError as exc:
                return self._error(404, str(exc))
            except VersionConflict as exc:
                return self._error(409, str(exc), current_version=exc.current_version)
            except (IllegalTransition, RetriesExhausted) as exc:
                return self._error(409, str(exc))
            except (ValueError, json.JSONDecodeError) as exc:
                return self._error(400, str(exc))
            except Exception as exc:  # noqa: BLE001 - last-resort handler
                traceback.print_exc()
                return self._error(500, f"internal error: {exc}")

        def do_GET(self):
            self._dispatch("GET")

        def do_POST(self):
            self._dispatch("POST")

    return Handler


def make_server(service: CosynthService, host: str = "127.0.0.1", port: int = 8765) -> ThreadingHTTPServer:
    return ThreadingHTTPServer((host, port), _make_handler(service))


def serve_forever(service: CosynthService, host: str = "127.0.0.1", port: int = 8765):
    server = make_server(service, host, port)
    print(f"review service listening on http://{host}:{server.server_address[1]}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
