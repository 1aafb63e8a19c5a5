"""Remote completion backend wire protocol.

One request per completion call:

    POST /complete
    {"mode": "partial" | "full",
     "image": <PNG b64>, "instance_mask": <PNG b64>,
     "occluder_mask"?, "deoccluded_mask"?, "background"?,   (partial)
     "init"?, "text"?, "strength"?,                          (full)
     "seed": int}
    -> {"rgba": <PNG b64>, "mask": <PNG b64>}

Masks travel as bit-exact 0/255 single-channel PNGs. The server side wraps
any local backend, so a real model process can stand behind the same URL.
"""

from __future__ import annotations

import base64
import json
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .backends import (
    BackendError,
    CompletionBackend,
    CompletionResult,
    FullRequest,
    PartialRequest,
)
from .masks import (
    mask_from_png_bytes,
    mask_to_png_bytes,
    rgba_from_png_bytes,
    rgba_to_png_bytes,
)


def _b64_rgba(img) -> str:
    return base64.b64encode(rgba_to_png_bytes(img)).decode("ascii")


def _b64_mask(m) -> str:
    return base64.b64encode(mask_to_png_bytes(m)).decode("ascii")


def _rgba_b64(s: str):
    return rgba_from_png_bytes(base64.b64decode(s))


def _mask_b64(s: str):
    return mask_from_png_bytes(base64.b64decode(s))


class RemoteBackendError(BackendError):
    pass


class RemoteBackend(CompletionBackend):
    """Client half of the wire protocol."""

    capabilities = frozenset({"partial", "full"})

    def __init__(self, url: str, timeout: float = 60.0, resolution: int | None = None):
        self.url = url.rstrip("/")
        self.timeout = timeout
        self.resolution = resolution
        self.identity = f"remote[{self.url}]"

    def _post(self, payload: dict) -> dict:
        data = json.dumps(payload).encode()
        req = urllib.request.Request(
            f"{self.url}/complete", data=data, headers={"Content-Type": "application/json"}
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                doc = json.loads(resp.read().decode())
        except urllib.error.HTTPError as exc:
            detail = exc.read().decode(errors="replace")
            raise RemoteBackendError(f"{self.identity} returned {exc.code}: {detail}") from exc
        except urllib.error.URLError as exc:
            raise RemoteBackendError(f"{self.identity} unreachable: {exc.reason}") from exc
        if "rgba" not in doc or "mask" not in doc:
            raise RemoteBackendError(f"{self.identity} reply missing rgba/mask fields")
        return doc

    def complete_partial(self, req: PartialRequest) -> CompletionResult:
        doc = self._post(
            {
                "mode": "partial",
                "image": _b64_rgba(req.image),
                "instance_mask": _b64_mask(req.instance_mask),
                "occluder_mask": _b64_mask(req.occluder_mask),
                "deoccluded_mask": _b64_mask(req.deoccluded_mask),
                "background": _b64_rgba(req.background),
                "seed": req.seed,
            }
        )
        return CompletionResult(_rgba_b64(doc["rgba"]), _mask_b64(doc["mask"]))

    def complete_full(self, req: FullRequest) -> CompletionResult:
        payload = {
            "mode": "full",
            "image": _b64_rgba(req.image),
            "instance_mask": _b64_mask(req.instance_mask),
            "seed": req.seed,
            "strength": req.strength,
        }
        if req.text is not None:
            payload["text"] = req.text
        if req.init is not None:
            payload["init"] = _b64_rgba(req.init)
        doc = self._post(payload)
        return CompletionResult(_rgba_b64(doc["rgba"]), _mask_b64(doc["mask"]))


def _make_handler(backend: CompletionBackend):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):
            pass

        def _send(self, status: int, payload: dict):
            raw = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(raw)))
            self.end_headers()
            self.wfile.write(raw)

        def do_POST(self):
            if self.path.rstrip("/") != "/complete":
                return self._send(404, {"error": f"no route {self.path}"})
            try:
                length = int(self.headers.get("Content-Length") or 0)
                doc = json.loads(self.rfile.read(length).decode())
                mode = doc.get("mode")
                if mode == "partial":
                    req = PartialRequest(
                        image=_rgba_b64(doc["image"]),
                        instance_mask=_mask_b64(doc["instance_mask"]),
                        occluder_mask=_mask_b64(doc["occluder_mask"]),
                        deoccluded_mask=_mask_b64(doc["deoccluded_mask"]),
                        background=_rgba_b64(doc["background"]),
                        seed=int(doc.get("seed", 0)),
                    )
                    result = backend.complete_partial(req)
                elif mode == "full":
                    req = FullRequest(
                        image=_rgba_b64(doc["image"]),
                        instance_mask=_mask_b64(doc["instance_mask"]),
                        text=doc.get("text"),
                        seed=int(doc.get("seed", 0)),
                        init=_rgba_b64(doc["init"]) if doc.get("init") else None,
                        strength=float(doc.get("strength", 1.0)),
                    )
                    result = backend.complete_full(req)
                else:
                    return self._send(400, {"error": f"unknown mode {mode!r}"})
                self._send(200, {"rgba": _b64_rgba(result.rgba), "mask": _b64_mask(result.mask)})
            except KeyError as exc:
                self._send(400, {"error": f"missing field {exc}"})
            except Exception as exc:  # noqa: BLE001 - protocol boundary
                self._send(500, {"error": str(exc)})

    return Handler


def make_backend_server(
    backend: CompletionBackend, host: str = "127.0.0.1", port: int = 0
) -> ThreadingHTTPServer:
    """Expose a local backend over the wire protocol (port 0 = ephemeral)."""
    return ThreadingHTTPServer((host, port), _make_handler(backend))
