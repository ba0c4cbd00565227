"""JSON-over-HTTP adapter protocol for out-of-process model servers.

Every operation is ``POST <base>/v1/<op>`` with a JSON body; ``GET
<base>/v1/ping`` is the health check. Rasters travel as base64 PNG (masks as
single-channel 0/255), feature maps as base64 ``.npy``. Each request carries
``protocol``; each response carries ``protocol`` and ``backend_version``.

Noisy states are sent as ``{"pixels": <png>, "timestep": t, "token": str|null}``.
The token names server-side state (latents, scheduler); a state without one
is re-encoded by the server from its pixels.

Errors: HTTP 4xx with ``{"error": {"kind": "contract", "message": ...}}`` is a
contract violation; connection failures, timeouts and 5xx are transport
errors and may be retried.
"""

from __future__ import annotations

import base64
import io
import itertools
import json
import logging
import threading
import time
import urllib.error
import urllib.request
from collections import OrderedDict
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Dict, Optional

import numpy as np
from PIL import Image

from ..core import as_image, as_mask
from .base import (BackendContractError, BackendError, Backends, BackendTransportError,
                   DepthOrderer, DepthVerdict, DiffusionBackend, Instance, MetricBackend,
                   NoisyState, Remover, Segmenter)

log = logging.getLogger(__name__)

PROTOCOL = "amodal-backend/1"
OPS = ("diffuse_range", "add_noise", "extract_decoder_features", "segment_instances",
       "order_depth", "remove_objects", "metric")


# ---------------------------------------------------------------------------
# payload codecs
# ---------------------------------------------------------------------------

def encode_image(image) -> str:
    buf = io.BytesIO()
    Image.fromarray(as_image(image), mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_image(data: str) -> np.ndarray:
    with Image.open(io.BytesIO(base64.b64decode(data))) as im:
        return np.array(im.convert("RGB"), dtype=np.uint8)


def encode_mask(mask) -> str:
    buf = io.BytesIO()
    Image.fromarray(as_mask(mask).astype(np.uint8) * 255, mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_mask(data: str) -> np.ndarray:
    with Image.open(io.BytesIO(base64.b64decode(data))) as im:
        return np.array(im.convert("L")) >= 128


def encode_array(arr) -> str:
    buf = io.BytesIO()
    np.save(buf, np.asarray(arr), allow_pickle=False)
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_array(data: str) -> np.ndarray:
    return np.load(io.BytesIO(base64.b64decode(data)), allow_pickle=False)


def encode_state(state: NoisyState, token: Optional[str] = None) -> dict:
    return {"pixels": encode_image(state.pixels), "timestep": int(state.timestep),
            "token": token}


# ---------------------------------------------------------------------------
# client
# ---------------------------------------------------------------------------

class RemoteBackend(DiffusionBackend, Segmenter, DepthOrderer, Remover, MetricBackend):
    """Client for one model server speaking the adapter protocol."""

    def __init__(self, base_url: str, timeout: float = 120.0, retries: int = 0,
                 total_steps: int = 50, single_flight: bool = False):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.total_steps = total_steps
        self.single_flight = single_flight
        self._version: Optional[str] = None

    # -- transport ---------------------------------------------------------

    def _request(self, method: str, path: str, body: Optional[dict] = None) -> dict:
        url = f"{self.base_url}/v1/{path}"
        data = None
        if body is not None:
            data = json.dumps(dict(body, protocol=PROTOCOL)).encode()
        last = None
        for attempt in range(self.retries + 1):
            req = urllib.request.Request(url, data=data, method=method,
                                         headers={"Content-Type": "application/json"})
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    payload = json.loads(resp.read().decode())
                break
            except urllib.error.HTTPError as exc:
                detail = _error_message(exc)
                if 400 <= exc.code < 500:
                    raise BackendContractError(f"{path}: {detail}") from exc
                last = BackendTransportError(f"{path}: HTTP {exc.code}: {detail}")
            except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
                last = BackendTransportError(f"{path}: {exc}")
            if attempt < self.retries:
                time.sleep(min(0.1 * 2 ** attempt, 2.0))
        else:
            raise last
        if payload.get("protocol") != PROTOCOL:
            raise BackendContractError(f"{path}: unexpected protocol {payload.get('protocol')!r}")
        self._version = payload.get("backend_version", self._version)
        return payload

    def ping(self) -> dict:
        return self._request("GET", "ping")

    def identity(self):
        return {"name": "remote", "url": self.base_url, "version": self._version or "unknown"}

    # -- diffusion ---------------------------------------------------------

    def _state(self, payload: dict) -> NoisyState:
        s = payload["state"]
        return NoisyState(decode_image(s["pixels"]), int(s["timestep"]),
                          {"token": s.get("token")})

    def diffuse_range(self, image_or_state, inpaint_mask, prompt, s, e, *, seed=0,
                      origin=(0, 0)):
        self.check_range(image_or_state, s, e)
        body = {"mask": encode_mask(inpaint_mask), "prompt": prompt, "s": s, "e": e,
                "seed": int(seed), "origin": list(origin)}
        if isinstance(image_or_state, NoisyState):
            token = (image_or_state.handle or {}).get("token")
            body["state"] = encode_state(image_or_state, token)
        else:
            body["image"] = encode_image(image_or_state)
        out = self._state(self._request("POST", "diffuse_range", body))
        if out.timestep != e:
            raise BackendContractError(f"server returned timestep {out.timestep}, expected {e}")
        return out

    def add_noise(self, image, k, *, seed=0, origin=(0, 0)):
        if not 0 <= k <= self.total_steps:
            raise BackendContractError(f"timestep {k} out of range")
        return self._state(self._request("POST", "add_noise", {
            "image": encode_image(image), "k": k, "seed": int(seed), "origin": list(origin)}))

    def extract_decoder_features(self, state, layer):
        token = (state.handle or {}).get("token")
        out = self._request("POST", "extract_decoder_features",
                            {"state": encode_state(state, token), "layer": int(layer)})
        return decode_array(out["features"])

    # -- other roles -------------------------------------------------------

    def segment_instances(self, image, vocabulary, *, origin=(0, 0)):
        out = self._request("POST", "segment_instances", {
            "image": encode_image(image), "vocabulary": list(vocabulary), "origin": list(origin)})
        insts = []
        for d in out["instances"]:
            score = float(d.get("score", 1.0))
            if not 0.0 <= score <= 1.0:
                raise BackendContractError(f"instance score {score} outside [0, 1]")
            insts.append(Instance(decode_mask(d["mask"]), d["category"], score))
        return insts

    def order_depth(self, image, mask_a, mask_b, *, origin=(0, 0)):
        out = self._request("POST", "order_depth", {
            "image": encode_image(image), "mask_a": encode_mask(mask_a),
            "mask_b": encode_mask(mask_b), "origin": list(origin)})
        try:
            return DepthVerdict(out["verdict"])
        except ValueError as exc:
            raise BackendContractError(f"unknown depth verdict {out['verdict']!r}") from exc

    def remove_objects(self, image, mask, *, origin=(0, 0)):
        out = self._request("POST", "remove_objects", {
            "image": encode_image(image), "mask": encode_mask(mask), "origin": list(origin)})
        return decode_image(out["image"])

    def score(self, prediction, target, category):
        out = self._request("POST", "metric", {
            "prediction": encode_image(prediction), "target": encode_image(target),
            "category": category})
        return {k: float(v) for k, v in out["scores"].items()}


def _error_message(exc: urllib.error.HTTPError) -> str:
    try:
        return json.loads(exc.read().decode())["error"]["message"]
    except Exception:
        return exc.reason if isinstance(exc.reason, str) else str(exc)


def remote_backends(url: Optional[str] = None, urls: Optional[Dict[str, str]] = None,
                    **kwargs) -> Backends:
    """Backends over HTTP; ``urls`` maps roles to endpoints, ``url`` is the fallback."""
    urls = dict(urls or {})
    roles = ("diffusion", "segmenter", "depth", "remover")
    clients: Dict[str, RemoteBackend] = {}

    def client(role):
        u = urls.get(role) or url
        if not u:
            raise ValueError(f"no endpoint configured for the {role} backend")
        if u not in clients:
            clients[u] = RemoteBackend(u, **kwargs)
        return clients[u]

    metrics = client("metrics") if urls.get("metrics") else None
    return Backends(*(client(r) for r in roles), metrics=metrics)


# ---------------------------------------------------------------------------
# reference server
# ---------------------------------------------------------------------------

class _ContractViolation(Exception):
    pass


class BackendService:
    """Dispatches protocol requests to in-process backends.

    Server-side state handles are kept in a bounded LRU table keyed by token.
    """

    def __init__(self, backends: Backends, version: Optional[str] = None,
                 max_states: int = 256):
        self.backends = backends
        self.version = version or backends.diffusion.identity().get("version", "0")
        self._states: "OrderedDict[str, object]" = OrderedDict()
        self._max_states = max_states
        self._ids = itertools.count(1)
        self._lock = threading.Lock()

    def _remember(self, state: NoisyState) -> dict:
        token = None
        if state.handle is not None:
            with self._lock:
                token = f"s{next(self._ids)}"
                self._states[token] = state.handle
                while len(self._states) > self._max_states:
                    self._states.popitem(last=False)
        return encode_state(state, token)

    def _recall(self, d: dict) -> NoisyState:
        handle = None
        if d.get("token"):
            with self._lock:
                handle = self._states.get(d["token"])
        return NoisyState(decode_image(d["pixels"]), int(d["timestep"]), handle)

    def ping(self) -> dict:
        return {"protocol": PROTOCOL, "backend_version": self.version,
                "roles": self.backends.identities(), "ops": list(OPS)}

    def handle(self, op: str, req: dict) -> dict:
        if req.get("protocol") != PROTOCOL:
            raise _ContractViolation(f"unsupported protocol {req.get('protocol')!r}")
        b = self.backends
        origin = tuple(req.get("origin", (0, 0)))
        if op == "diffuse_range":
            src = self._recall(req["state"]) if "state" in req else decode_image(req["image"])
            out = b.diffusion.diffuse_range(src, decode_mask(req["mask"]), req.get("prompt", ""),
                                            int(req["s"]), int(req["e"]),
                                            seed=int(req.get("seed", 0)), origin=origin)
            body = {"state": self._remember(out), "timestep": out.timestep}
        elif op == "add_noise":
            out = b.diffusion.add_noise(decode_image(req["image"]), int(req["k"]),
                                        seed=int(req.get("seed", 0)), origin=origin)
            body = {"state": self._remember(out), "timestep": out.timestep}
        elif op == "extract_decoder_features":
            feats = b.diffusion.extract_decoder_features(self._recall(req["state"]),
                                                         int(req["layer"]))
            body = {"features": encode_array(feats), "shape": list(np.shape(feats))}
        elif op == "segment_instances":
            insts = b.segmenter.segment_instances(decode_image(req["image"]),
                                                  req.get("vocabulary", []), origin=origin)
            body = {"instances": [{"mask": encode_mask(i.mask), "category": i.category,
                                   "score": float(i.score)} for i in insts]}
        elif op == "order_depth":
            v = b.depth.order_depth(decode_image(req["image"]), decode_mask(req["mask_a"]),
                                    decode_mask(req["mask_b"]), origin=origin)
            body = {"verdict": DepthVerdict(v).value}
        elif op == "remove_objects":
            img = b.remover.remove_objects(decode_image(req["image"]), decode_mask(req["mask"]),
                                           origin=origin)
            body = {"image": encode_image(img)}
        elif op == "metric":
            if b.metrics is None:
                raise _ContractViolation("no metric backend configured")
            body = {"scores": b.metrics.score(decode_image(req["prediction"]),
                                              decode_image(req["target"]), req["category"])}
        else:
            raise _ContractViolation(f"unknown op {op!r}")
        body.update(protocol=PROTOCOL, backend_version=self.version)
        return body


def _handler_for(service: BackendService):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):
            log.debug("backend server: " + fmt, *args)

        def _send(self, code: int, body: dict):
            data = json.dumps(body).encode()
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            if self.path.rstrip("/") == "/v1/ping":
                self._send(200, service.ping())
            else:
                self._send(404, {"error": {"kind": "contract", "message": "not found"}})

        def do_POST(self):
            parts = self.path.strip("/").split("/")
            if len(parts) != 2 or parts[0] != "v1":
                self._send(404, {"error": {"kind": "contract", "message": "not found"}})
                return
            try:
                n = int(self.headers.get("Content-Length", 0))
                req = json.loads(self.rfile.read(n).decode() or "{}")
                self._send(200, service.handle(parts[1], req))
            except (_ContractViolation, BackendContractError, KeyError, ValueError) as exc:
                self._send(400, {"error": {"kind": "contract", "message": str(exc)}})
            except BackendError as exc:
                self._send(503, {"error": {"kind": "transport", "message": str(exc)}})
            except Exception as exc:  # noqa: BLE001 - surfaced to the client as a 500
                log.exception("backend server failure")
                self._send(500, {"error": {"kind": "internal", "message": str(exc)}})

    return Handler


def make_server(backends: Backends, host: str = "127.0.0.1", port: int = 0,
                version: Optional[str] = None) -> ThreadingHTTPServer:
    """HTTP server exposing ``backends``; call ``serve_forever`` to run it."""
    server = ThreadingHTTPServer((host, port), _handler_for(BackendService(backends, version)))
    server.daemon_threads = True
    return server
