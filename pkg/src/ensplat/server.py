"""HTTP serving layer for interactive exploration.

Endpoints (JSON in, PNG or JSON out):
    GET  /healthz      liveness probe, body "ok"
    GET  /meta         parameter names, bounds, tasks, image resolution
    POST /render       {"camera": {...}, "p_sim": [...], "task": ..., "p_vis": [...]} -> PNG
    POST /render_raw   same body -> raw little-endian float32 framebuffer

The model bundle is immutable shared state; a semaphore bounds concurrent
renders. Out-of-range parameters are clamped and flagged with an
``X-Clamped: true`` response header. CLI flags may be overridden through
ENSPLAT_SERVE_* environment variables (documented in the README).
"""

from __future__ import annotations

import json
import os
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from . import pngio
from .bundle import ModelBundle
from .errors import ConfigError, EnsplatError


def bundle_meta_response(bundle: ModelBundle) -> dict:
    meta = bundle.meta
    return {
        "image": meta["image"],
        "scene": meta.get("scene", {}),
        "simulation": meta["simulation"],
        "tasks": meta.get("tasks", {}),
        "n_gaussians": bundle.canonical.n,
    }


class _Handler(BaseHTTPRequestHandler):
    server_version = "ensplat"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # quiet by default
        if self.server.verbose:
            super().log_message(fmt, *args)

    def _send(self, code: int, body: bytes, content_type: str, headers=None):
        self.send_response(code)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        for k, v in (headers or {}).items():
            self.send_header(k, v)
        self.end_headers()
        self.wfile.write(body)

    def _send_json(self, code: int, payload: dict, headers=None):
        self._send(code, json.dumps(payload).encode(), "application/json", headers)

    def do_GET(self):
        if self.path == "/healthz":
            self._send(200, b"ok", "text/plain")
        elif self.path == "/meta":
            self._send_json(200, bundle_meta_response(self.server.bundle))
        else:
            self._send_json(404, {"error": f"unknown path {self.path}"})

    def do_POST(self):
        if self.path not in ("/render", "/render_raw"):
            self._send_json(404, {"error": f"unknown path {self.path}"})
            return
        try:
            length = int(self.headers.get("Content-Length", 0))
            request = json.loads(self.rfile.read(length))
        except (ValueError, json.JSONDecodeError):
            self._send_json(400, {"error": "malformed JSON body"})
            return
        try:
            payload, headers, content_type = self._render(request, raw=self.path == "/render_raw")
        except KeyError as e:
            self._send_json(404, {"error": str(e)})
            return
        except (ConfigError, EnsplatError) as e:
            self._send_json(422, {"error": str(e)})
            return
        except Exception as e:  # noqa: BLE001 -- surface anything else as 400
            self._send_json(400, {"error": f"bad request: {e}"})
            return
        self._send(200, payload, content_type, headers)

    def _render(self, request: dict, raw: bool):
        if "camera" not in request or "p_sim" not in request:
            raise ConfigError("request requires 'camera' and 'p_sim'")
        with self.server.render_slots:
            img, clamped = self.server.bundle.render(
                request["camera"], request["p_sim"], task=request.get("task"),
                p_vis_raw=request.get("p_vis"), n_threads=self.server.threads_per_render)
        headers = {"X-Clamped": "true"} if clamped else {}
        if raw:
            return (np.ascontiguousarray(img, dtype="<f4").tobytes(),
                    headers, "application/octet-stream")
        return pngio.to_bytes(img), headers, "image/png"


def make_server(bundle: ModelBundle, bind: str = "127.0.0.1:8080", workers: int = 0,
                threads_per_render: int = 1, verbose: bool = False) -> ThreadingHTTPServer:
    host, _, port = bind.partition(":")
    srv = ThreadingHTTPServer((host or "127.0.0.1", int(port or 8080)), _Handler)
    srv.bundle = bundle
    srv.render_slots = threading.BoundedSemaphore(workers or os.cpu_count() or 1)
    srv.threads_per_render = threads_per_render
    srv.verbose = verbose
    return srv


def serve(bundle_path, bind: str = "127.0.0.1:8080", workers: int = 0,
          threads_per_render: int = 1, verbose: bool = False) -> None:
    bind = os.environ.get("ENSPLAT_SERVE_BIND", bind)
    workers = int(os.environ.get("ENSPLAT_SERVE_WORKERS", workers))
    bundle = ModelBundle.load(bundle_path)
    srv = make_server(bundle, bind, workers, threads_per_render, verbose)
    host, port = srv.server_address
    print(f"serving {bundle_path} on http://{host}:{port}", flush=True)
    try:
        srv.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        srv.server_close()
