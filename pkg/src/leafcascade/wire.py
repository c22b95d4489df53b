"""Remote stage serving over TCP.

Request frame::

    b"SWPR" | u8 version (1) | u8 type (1 infer, 2 ping) | u8 rank
            | u32 extent * rank | float32 payload

Response frame::

    b"SWPS" | u8 version | u8 status | u32 class count | float32 probs

All multi-byte fields are little-endian. The payload length follows from the
extents, so no separate length prefix is sent. Status codes: 0 ok, 1 bad
shape, 2 model unavailable, 3 malformed (the server closes the connection
after a status 3).
"""
import logging
import socket
import socketserver
import struct
import threading
from typing import Optional

import numpy as np

from .netdef import ShapeError, StageUnavailable

log = logging.getLogger(__name__)

REQ_MAGIC = b"SWPR"
RESP_MAGIC = b"SWPS"
VERSION = 1
MSG_INFER = 1
MSG_PING = 2
MAX_RANK = 4
MAX_FRAME = 64 * 1024 * 1024

OK, BAD_SHAPE, UNAVAILABLE, MALFORMED = 0, 1, 2, 3


class WireError(StageUnavailable):
    """Transport or protocol failure talking to a stage server."""


class MalformedFrame(ValueError):
    pass


def encode_request(x: Optional[np.ndarray], msg_type: int = MSG_INFER) -> bytes:
    if msg_type == MSG_PING:
        return REQ_MAGIC + struct.pack("<BBB", VERSION, MSG_PING, 0)
    x = np.asarray(x)
    if x.ndim > MAX_RANK:
        raise ValueError(f"rank {x.ndim} exceeds {MAX_RANK}")
    head = REQ_MAGIC + struct.pack("<BBB", VERSION, msg_type, x.ndim) + struct.pack(f"<{x.ndim}I", *x.shape)
    return head + np.ascontiguousarray(x, dtype="<f4").tobytes()


def encode_response(status: int, probs: Optional[np.ndarray] = None) -> bytes:
    probs = np.zeros(0, dtype="<f4") if probs is None else np.ascontiguousarray(probs, dtype="<f4").ravel()
    return RESP_MAGIC + struct.pack("<BBI", VERSION, status, probs.size) + probs.tobytes()


def _recv_exact(sock_or_file, n: int) -> bytes:
    """Read exactly ``n`` bytes from a socket file; ``b""`` on clean EOF before any byte."""
    buf = bytearray()
    while len(buf) < n:
        chunk = sock_or_file.read(n - len(buf))
        if not chunk:
            if not buf:
                return b""
            raise MalformedFrame("connection closed mid-frame")
        buf += chunk
    return bytes(buf)


def read_request(f):
    """Return ``(msg_type, array_or_None)`` or None on EOF. Raises MalformedFrame."""
    head = _recv_exact(f, 7)
    if not head:
        return None
    if len(head) < 7 or head[:4] != REQ_MAGIC:
        raise MalformedFrame(f"bad magic {head[:4]!r}")
    version, msg_type, rank = struct.unpack("<BBB", head[4:])
    if version != VERSION:
        raise MalformedFrame(f"unsupported version {version}")
    if msg_type not in (MSG_INFER, MSG_PING):
        raise MalformedFrame(f"unknown message type {msg_type}")
    if rank > MAX_RANK:
        raise MalformedFrame(f"rank {rank} exceeds {MAX_RANK}")
    dims = struct.unpack(f"<{rank}I", _recv_exact(f, 4 * rank)) if rank else ()
    nbytes = 4 * int(np.prod(dims, dtype=np.int64)) if rank else 0
    if nbytes > MAX_FRAME:
        raise MalformedFrame(f"payload of {nbytes} bytes exceeds the frame cap")
    payload = _recv_exact(f, nbytes) if nbytes else b""
    if len(payload) != nbytes:
        raise MalformedFrame("truncated payload")
    if msg_type == MSG_PING:
        return MSG_PING, None
    if rank == 0:
        raise MalformedFrame("infer request without a tensor")
    return MSG_INFER, np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)


def read_response(f):
    """Return ``(status, probs)``; raises MalformedFrame."""
    head = _recv_exact(f, 10)
    if len(head) < 10 or head[:4] != RESP_MAGIC:
        raise MalformedFrame("bad or missing response header")
    _version, status, count = struct.unpack("<BBI", head[4:])
    if 4 * count > MAX_FRAME:
        raise MalformedFrame("response exceeds the frame cap")
    body = _recv_exact(f, 4 * count) if count else b""
    if len(body) != 4 * count:
        raise MalformedFrame("truncated response")
    return status, np.frombuffer(body, dtype="<f4").astype(np.float32)


# -- server ---------------------------------------------------------------


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        model = self.server.model
        while True:
            try:
                req = read_request(self.rfile)
            except MalformedFrame as exc:
                log.info("malformed frame from %s: %s", self.client_address, exc)
                self._send(encode_response(MALFORMED))
                return
            except OSError:
                return
            if req is None:
                return
            msg_type, x = req
            if msg_type == MSG_PING:
                self._send(encode_response(OK))
                continue
            if x.ndim == 4 and x.shape[0] == 1:
                x = x[0]
            if tuple(x.shape) != tuple(model.input_dims):
                self._send(encode_response(BAD_SHAPE))
                continue
            try:
                probs = model(x)
            except Exception:  # any model failure is reported, the server keeps running
                log.exception("stage model failed")
                self._send(encode_response(UNAVAILABLE))
                continue
            self._send(encode_response(OK, probs))

    def _send(self, data):
        try:
            self.wfile.write(data)
            self.wfile.flush()
        except OSError:
            pass


class StageServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 128

    def __init__(self, model, address=("127.0.0.1", 0)):
        self.model = model
        super().__init__(address, _Handler)
        self._thread = None

    @property
    def address(self):
        return self.server_address[:2]

    def start(self) -> "StageServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve(model, host: str = "127.0.0.1", port: int = 0, background: bool = True) -> StageServer:
    """Serve ``model``; with ``background=False`` this blocks until interrupted."""
    server = StageServer(model, (host, port))
    if background:
        return server.start()
    try:
        server.serve_forever()
    finally:
        server.server_close()
    return server


# -- client ---------------------------------------------------------------


def parse_address(address):
    if isinstance(address, tuple):
        return address[0], int(address[1])
    host, _, port = str(address).rpartition(":")
    if not host or not port:
        raise ValueError(f"expected host:port, got {address!r}")
    return host, int(port)


class RemoteStage:
    """Probability provider that forwards each call to a stage server.

    Every call opens a connection, sends one request and reads one response,
    so calls from several threads do not interfere. Connection failures and
    timeouts raise :class:`WireError`, which the cascade treats as the stage
    being unavailable.
    """

    def __init__(self, address, input_dims=(3, 96, 96), class_count: Optional[int] = None, timeout: float = 5.0):
        self.host, self.port = parse_address(address)
        self.input_dims = tuple(input_dims)
        self.class_count = class_count
        self.timeout = timeout
        self.calls = 0
        self._lock = threading.Lock()

    def _roundtrip(self, frame: bytes):
        try:
            with socket.create_connection((self.host, self.port), timeout=self.timeout) as sock:
                sock.settimeout(self.timeout)
                sock.sendall(frame)
                with sock.makefile("rb") as f:
                    return read_response(f)
        except (OSError, MalformedFrame) as exc:
            raise WireError(f"stage server {self.host}:{self.port} unavailable: {exc}") from exc

    def ping(self) -> bool:
        status, probs = self._roundtrip(encode_request(None, MSG_PING))
        return status == OK and probs.size == 0

    def __call__(self, x) -> np.ndarray:
        with self._lock:
            self.calls += 1
        x = np.asarray(x, dtype=np.float32)
        if tuple(x.shape) != self.input_dims:
            raise ShapeError(f"remote stage expects {self.input_dims}, got {x.shape}")
        status, probs = self._roundtrip(encode_request(x))
        if status == BAD_SHAPE:
            raise ShapeError(f"server rejected input shape {x.shape}")
        if status != OK:
            raise WireError(f"stage server returned status {status}")
        if self.class_count is None:
            self.class_count = probs.size
        return probs


def remote_stage(address, input_dims=(3, 96, 96), class_count: Optional[int] = None,
                 timeout: float = 5.0) -> RemoteStage:
    return RemoteStage(address, input_dims, class_count, timeout)
