"""Prediction-only access to a model, in process or over HTTP.

Wire protocol: ``POST /predict`` with ``{"inputs": [[...], ...]}`` answers
``{"probs": [[...], ...]}``. ``GET /info`` reports ``{"d": ..., "k": ...}``
so a client can size its requests. No route returns parameters.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Optional

import numpy as np
import requests

from .errors import DataError, ProtocolError, TransportError
from .model import ClassifierModel, load_checkpoint

log = logging.getLogger(__name__)

MAX_ROWS_PER_REQUEST = 1024
DEFAULT_TIMEOUT_MS = 10_000
RETRIES = 3
BACKOFF_S = 0.1
SUM_TOL = 1e-6


class BlackBoxHandle:
    """Opaque prediction interface: the only capability is :meth:`predict_batch`.

    The backend is held in a closure, so there is no attribute path back to
    a model's parameters.
    """

    __slots__ = ("_predict", "k")

    def __init__(self, predict: Callable[[np.ndarray], np.ndarray], k: int):
        object.__setattr__(self, "_predict", predict)
        object.__setattr__(self, "k", int(k))

    def __setattr__(self, name, value):
        raise AttributeError("BlackBoxHandle is immutable")

    def predict_batch(self, batch) -> np.ndarray:
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :] if x.size else x.reshape(0, 0)
        return self._predict(x)

    def __repr__(self):
        return f"BlackBoxHandle(k={self.k})"


def wrap_as_blackbox(model: ClassifierModel) -> BlackBoxHandle:
    """Seal a model behind a prediction-only handle. No copy is made."""
    forward = model.forward

    def predict(x):
        if x.shape[0] == 0:
            return np.zeros((0, model.k))
        return forward(x)

    return BlackBoxHandle(predict, model.k)


def from_function(fn: Callable[[np.ndarray], np.ndarray], k: int) -> BlackBoxHandle:
    """Handle over an arbitrary probability function; outputs are validated like remote ones."""

    def predict(x):
        return validate_probs(fn(x), x.shape[0], k)

    return BlackBoxHandle(predict, k)


def validate_probs(probs, n_rows: int, k: Optional[int]) -> np.ndarray:
    try:
        p = np.asarray(probs, dtype=np.float64)
    except (TypeError, ValueError):
        raise ProtocolError("probabilities are not a numeric matrix") from None
    if n_rows == 0 and p.size == 0:
        return np.zeros((0, k or 0))
    if p.ndim != 2 or p.shape[0] != n_rows or (k is not None and p.shape[1] != k):
        raise ProtocolError(f"expected {n_rows}x{k} probabilities, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ProtocolError("probabilities must be finite and non-negative")
    sums = p.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > SUM_TOL)
    if bad.size:
        raise ProtocolError(f"row {bad[0]} sums to {sums[bad[0]]:.6g}, not 1")
    return p


def _timeout_s(timeout_ms: Optional[float]) -> float:
    if timeout_ms is None:
        timeout_ms = float(os.environ.get("ILNL_TIMEOUT_MS", DEFAULT_TIMEOUT_MS))
    return timeout_ms / 1000.0


def _post_with_retries(session, url, payload, timeout, retries):
    last = None
    for attempt in range(retries):
        try:
            resp = session.post(url, data=payload, timeout=timeout,
                                headers={"Content-Type": "application/json"})
        except requests.RequestException as exc:
            last = exc
        else:
            if resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
            elif resp.status_code >= 400:
                raise ProtocolError(f"{url} rejected request: {resp.status_code} {resp.text.strip()}")
            else:
                try:
                    return resp.json()
                except ValueError:
                    raise ProtocolError(f"{url} returned non-JSON body") from None
        if attempt + 1 < retries:
            time.sleep(BACKOFF_S * 2 ** attempt)
    raise TransportError(f"{url} unreachable after {retries} attempts: {last}")


def remote(endpoint: str, k: Optional[int] = None, timeout_ms: Optional[float] = None,
           retries: int = RETRIES, max_in_flight: int = 1) -> BlackBoxHandle:
    """Handle for a served model at ``endpoint`` (``http://host:port``).

    Batches above 1024 rows are split into several requests, issued with at
    most ``max_in_flight`` concurrent connections. The timeout defaults to
    ``ILNL_TIMEOUT_MS`` from the environment.
    """
    base = endpoint.rstrip("/")
    if not base.startswith(("http://", "https://")):
        base = "http://" + base
    timeout = _timeout_s(timeout_ms)
    local = threading.local()

    def session():
        if not hasattr(local, "s"):
            local.s = requests.Session()
        return local.s

    if k is None:
        last = None
        for attempt in range(retries):
            try:
                info = session().get(base + "/info", timeout=timeout).json()
                k = int(info["k"])
                break
            except (requests.RequestException, ValueError, KeyError, TypeError) as exc:
                last = exc
                if attempt + 1 < retries:
                    time.sleep(BACKOFF_S * 2 ** attempt)
        else:
            raise TransportError(f"{base} unreachable after {retries} attempts: {last}")

    def one_chunk(chunk):
        body = json.dumps({"inputs": chunk.tolist()})
        reply = _post_with_retries(session(), base + "/predict", body, timeout, retries)
        if not isinstance(reply, dict) or "probs" not in reply:
            raise ProtocolError(f"{base} reply lacks 'probs'")
        return validate_probs(reply["probs"], chunk.shape[0], k)

    def predict(x):
        if x.shape[0] == 0:
            return np.zeros((0, k))
        chunks = [x[i: i + MAX_ROWS_PER_REQUEST] for i in range(0, x.shape[0], MAX_ROWS_PER_REQUEST)]
        if max_in_flight > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
                parts = list(pool.map(one_chunk, chunks))
        else:
            parts = [one_chunk(c) for c in chunks]
        return np.concatenate(parts, axis=0)

    return BlackBoxHandle(predict, k)


def predict_batch(handle: BlackBoxHandle, batch) -> np.ndarray:
    return handle.predict_batch(batch)


class _PredictHandler(BaseHTTPRequestHandler):
    server_version = "iterlnl-blackbox/1"
    model: ClassifierModel  # set on the per-server subclass

    def log_message(self, fmt, *args):
        log.debug("%s - %s", self.address_string(), fmt % args)

    def _reply(self, status, obj):
        body = json.dumps(obj).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path == "/info":
            self._reply(200, {"d": self.model.d, "k": self.model.k})
        else:
            self._reply(404, {"error": f"no route {self.path}"})

    def do_POST(self):
        if self.path != "/predict":
            self._reply(404, {"error": f"no route {self.path}"})
            return
        try:
            length = int(self.headers.get("Content-Length", 0))
            request = json.loads(self.rfile.read(length) or b"null")
        except (ValueError, json.JSONDecodeError):
            self._reply(400, {"error": "body is not valid JSON"})
            return
        if not isinstance(request, dict) or not isinstance(request.get("inputs"), list):
            self._reply(400, {"error": "expected an object with an 'inputs' list"})
            return
        rows = request["inputs"]
        if not rows:
            self._reply(200, {"probs": []})
            return
        d = self.model.d
        for i, row in enumerate(rows):
            if not isinstance(row, list) or len(row) != d:
                got = len(row) if isinstance(row, list) else type(row).__name__
                self._reply(400, {"error": f"row {i} has {got} features, expected d={d}"})
                return
        try:
            x = np.asarray(rows, dtype=np.float64)
        except (TypeError, ValueError):
            self._reply(400, {"error": "inputs must be numbers"})
            return
        if not np.all(np.isfinite(x)):
            self._reply(400, {"error": "inputs must be finite"})
            return
        self._reply(200, {"probs": self.model.forward(x).tolist()})


def make_server(model: ClassifierModel, bind_address: str = "127.0.0.1:8080") -> ThreadingHTTPServer:
    """Build (but do not start) a threaded HTTP server answering predictions for ``model``.

    Port 0 picks a free port; read it back from ``server.server_address``.
    """
    host, _, port = bind_address.rpartition(":")
    handler = type("PredictHandler", (_PredictHandler,), {"model": model})
    try:
        server = ThreadingHTTPServer((host or "127.0.0.1", int(port)), handler)
    except (OSError, ValueError) as exc:
        raise TransportError(f"cannot bind {bind_address}: {exc}") from exc
    server.daemon_threads = True
    return server


def serve(checkpoint_path, bind_address: str = "127.0.0.1:8080", background: bool = False):
    """Serve a checkpoint; blocks unless ``background`` is set, in which case the
    running server is returned (call ``shutdown()`` to stop it)."""
    try:
        model = load_checkpoint(checkpoint_path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {checkpoint_path}") from exc
    server = make_server(model, bind_address)
    if background:
        threading.Thread(target=server.serve_forever, daemon=True).start()
        return server
    host, port = server.server_address[:2]
    log.info("serving %s on http://%s:%d", checkpoint_path, host, port)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return server
