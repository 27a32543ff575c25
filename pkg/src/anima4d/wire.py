"""Remote guidance bridge: newline-delimited JSON over a stream socket.

One JSON object per line, UTF-8, '\n'-terminated, no pretty-printing. Frames
and gradients travel as base64 of little-endian float32, row-major. One
outstanding request per connection; the id must round-trip. Timeouts and
dropped connections are retryable; malformed or mismatched replies are
protocol errors and never produce gradients.
"""

from __future__ import annotations

import base64
import json
import socket
import socketserver
import threading
from dataclasses import dataclass

import numpy as np

from .errors import ProtocolError, RetryableTransportError
from .guidance import GuidanceGradient, GuidanceRequest, provide
from .renderer import CameraPose

_MAX_LINE = 512 * 1024 * 1024


def encode_array(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def decode_array(data: str, shape: tuple[int, ...]) -> np.ndarray:
    try:
        raw = base64.b64decode(data.encode("ascii"), validate=True)
    except Exception as exc:
        raise ProtocolError(f"bad base64 payload: {exc}") from None
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise ProtocolError(f"payload is {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def request_to_wire(req: GuidanceRequest, kind: str, req_id: int) -> bytes:
    n, h, w, _ = req.frames.shape
    obj = {
        "id": req_id,
        "kind": kind,
        "h": h,
        "w": w,
        "n_frames": n,
        "frames": encode_array(req.frames),
        "times": [float(t) for t in req.times],
        "poses": [[p.polar_deg, p.azimuth_deg, p.radius, p.fov_deg] for p in req.poses],
        "prompt": req.prompt_tag,
        "first_frame": bool(req.first_frame_flag),
        "sigma": float(req.noise_level),
    }
    if req.condition_frames is not None:
        obj["condition"] = encode_array(req.condition_frames)
    if req.background is not None:
        obj["background"] = [float(c) for c in req.background]
    return (json.dumps(obj, separators=(",", ":")) + "\n").encode("utf-8")


def request_from_wire(line: bytes) -> tuple[str, int, GuidanceRequest]:
    obj = _parse_line(line)
    for key in ("id", "kind", "h", "w", "n_frames", "frames", "times", "poses"):
        if key not in obj:
            raise ProtocolError(f"request missing field {key!r}")
    shape = (obj["n_frames"], obj["h"], obj["w"], 3)
    frames = decode_array(obj["frames"], shape)
    condition = decode_array(obj["condition"], shape) if "condition" in obj else None
    poses = tuple(CameraPose(*p) for p in obj["poses"])
    background = None
    if "background" in obj:
        background = np.asarray(obj["background"], dtype=np.float64)
        if background.shape != (3,):
            raise ProtocolError(f"background must be 3 floats, got {obj['background']!r}")
    req = GuidanceRequest(frames=frames, times=np.asarray(obj["times"], dtype=np.float64),
                          poses=poses, prompt_tag=obj.get("prompt", ""),
                          first_frame_flag=bool(obj.get("first_frame", False)),
                          condition_frames=condition,
                          noise_level=float(obj.get("sigma", 0.5)),
                          background=background)
    return obj["kind"], int(obj["id"]), req


def response_to_wire(grad: GuidanceGradient, req_id: int) -> bytes:
    obj = {"id": req_id, "grads": encode_array(grad.grads), "weight": float(grad.weight)}
    return (json.dumps(obj, separators=(",", ":")) + "\n").encode("utf-8")


def response_from_wire(line: bytes, expected_id: int, shape: tuple[int, ...],
                       provider_id: str) -> GuidanceGradient:
    obj = _parse_line(line)
    for key in ("id", "grads", "weight"):
        if key not in obj:
            raise ProtocolError(f"response missing field {key!r}")
    if obj["id"] != expected_id:
        raise ProtocolError(f"response id {obj['id']} does not match request id {expected_id}")
    grads = decode_array(obj["grads"], shape)
    return GuidanceGradient(grads=grads, weight=float(obj["weight"]), provider_id=provider_id)


def _parse_line(line: bytes) -> dict:
    try:
        obj = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed JSON line: {exc}") from None
    if not isinstance(obj, dict):
        raise ProtocolError("wire object must be a JSON object")
    return obj


def _read_line(sock: socket.socket, buffer: bytearray) -> bytes:
    """Read one '\n'-terminated line; EOF mid-line is a protocol error."""
    while True:
        idx = buffer.find(b"\n")
        if idx >= 0:
            line = bytes(buffer[:idx])
            del buffer[:idx + 1]
            return line
        if len(buffer) > _MAX_LINE:
            raise ProtocolError("wire line exceeds size limit")
        try:
            chunk = sock.recv(1 << 20)
        except socket.timeout:
            raise RetryableTransportError("timed out waiting for provider reply") from None
        except OSError as exc:
            raise RetryableTransportError(f"socket error: {exc}") from None
        if not chunk:
            if buffer:
                raise ProtocolError("connection closed mid-line (truncated reply)")
            raise RetryableTransportError("connection closed by provider")
        buffer.extend(chunk)


class RemoteProvider:
    """Client for one gradient kind against a host:port NDJSON server.

    Keeps the connection open between requests and allows exactly one
    in-flight request. Transport failures close the socket so the next call
    reconnects.
    """

    def __init__(self, kind: str, endpoint: str, timeout: float = 30.0):
        if ":" not in endpoint:
            raise ProtocolError(f"endpoint must be host:port, got {endpoint!r}")
        host, port = endpoint.rsplit(":", 1)
        try:
            self._addr = (host, int(port))
        except ValueError:
            raise ProtocolError(f"bad port in endpoint {endpoint!r}") from None
        self.kind = kind
        self.timeout = timeout
        self.provider_id = f"remote-{kind}@{endpoint}"
        self._sock: socket.socket | None = None
        self._buffer = bytearray()
        self._next_id = 0

    def _connect(self) -> socket.socket:
        if self._sock is None:
            try:
                self._sock = socket.create_connection(self._addr, timeout=self.timeout)
            except OSError as exc:
                raise RetryableTransportError(f"cannot connect to {self._addr}: {exc}") from None
            self._buffer.clear()
        return self._sock

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None
                self._buffer.clear()

    def provide(self, req: GuidanceRequest) -> GuidanceGradient:
        req_id = self._next_id
        self._next_id += 1
        sock = self._connect()
        try:
            sock.sendall(request_to_wire(req, self.kind, req_id))
            line = _read_line(sock, self._buffer)
        except RetryableTransportError:
            self.close()
            raise
        except OSError as exc:
            self.close()
            raise RetryableTransportError(f"socket error: {exc}") from None
        try:
            return response_from_wire(line, req_id, req.frames.shape, self.provider_id)
        except ProtocolError:
            # Desynchronized stream; drop the connection rather than guess.
            self.close()
            raise


class ProviderServer:
    """Serves local providers over the wire protocol (tests, demos, or
    exposing the oracles to another process). providers: kind -> provider."""

    def __init__(self, providers: dict, host: str = "127.0.0.1", port: int = 0):
        outer = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self) -> None:
                while True:
                    line = self.rfile.readline(_MAX_LINE)
                    if not line or not line.endswith(b"\n"):
                        return
                    try:
                        kind, req_id, req = request_from_wire(line[:-1])
                        provider = outer.providers.get(kind)
                        if provider is None:
                            raise ProtocolError(f"no provider for kind {kind!r}")
                        grad = provide(provider, req)
                    except ProtocolError:
                        return  # drop the connection; client surfaces the error
                    self.wfile.write(response_to_wire(grad, req_id))

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self.providers = providers
        self._server = Server((host, port), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def endpoint(self) -> str:
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "ProviderServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()


def build_remote_providers(cfg) -> dict:
    endpoint = cfg["guidance.remote.endpoint"]
    timeout = cfg["guidance.remote.timeout"]
    return {kind: RemoteProvider(kind, endpoint, timeout)
            for kind in ("video", "image3d", "refine")}
