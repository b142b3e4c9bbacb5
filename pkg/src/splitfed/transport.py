"""Framed binary messages and byte-counting endpoints.

Frame layout (all integers little-endian)::

    b"SFLG" | version u8 (=1) | kind u8 | payload_length u64 | payload

Tensors are ``dtype u8 (1=f32, 2=f64) | ndim u8 | dims u32[ndim] | data``;
label vectors are ``count u32 | u32[count]``.
"""
from __future__ import annotations

import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass
from enum import IntEnum
from typing import Union

import numpy as np

from .nnkernel import ParamEntry, ParameterSet

MAGIC = b"SFLG"
VERSION = 1
HEADER = struct.Struct("<4sBBQ")
HEADER_SIZE = HEADER.size  # 14

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 1, np.dtype("float64"): 2}
_U32_MAX = 2**32 - 1


class Kind(IntEnum):
    MODEL_DOWN = 1
    MODEL_UP = 2
    SMASHED = 3
    SMASHED_GRAD = 4
    EVAL_REQUEST = 5
    EVAL_REPLY = 6
    CONTROL = 7


class ControlCode(IntEnum):
    HELLO = 1  # value = client id
    CLIENT_DONE = 2  # client finished its pass for this round
    SHUTDOWN = 3


class TransportError(Exception):
    pass


class CodecError(TransportError, ValueError):
    pass


class TruncatedFrame(CodecError):
    pass


class BadMagic(CodecError):
    pass


class BadVersion(CodecError):
    pass


class UnknownKind(CodecError):
    pass


class LengthMismatch(CodecError):
    pass


class PeerClosed(TransportError):
    pass


# ---------------------------------------------------------------------------
# messages


@dataclass(frozen=True, eq=False)
class ModelDown:
    params: ParameterSet
    kind = Kind.MODEL_DOWN


@dataclass(frozen=True, eq=False)
class ModelUp:
    params: ParameterSet
    kind = Kind.MODEL_UP


@dataclass(frozen=True, eq=False)
class Smashed:
    client_id: int
    epoch: int
    batch_index: int
    activations: np.ndarray
    labels: np.ndarray
    kind = Kind.SMASHED


@dataclass(frozen=True, eq=False)
class SmashedGrad:
    client_id: int
    epoch: int
    batch_index: int
    grad: np.ndarray
    kind = Kind.SMASHED_GRAD


@dataclass(frozen=True, eq=False)
class EvalRequest:
    round: int
    inputs: np.ndarray
    kind = Kind.EVAL_REQUEST


@dataclass(frozen=True, eq=False)
class EvalReply:
    round: int
    outputs: np.ndarray
    kind = Kind.EVAL_REPLY


@dataclass(frozen=True)
class Control:
    code: int
    round: int = 0
    value: int = 0
    kind = Kind.CONTROL


Message = Union[ModelDown, ModelUp, Smashed, SmashedGrad, EvalRequest, EvalReply, Control]


def messages_equal(a, b) -> bool:
    """Structural equality with bit-exact arrays (dtype included)."""
    if type(a) is not type(b):
        return False
    for name in a.__dataclass_fields__:
        x, y = getattr(a, name), getattr(b, name)
        if isinstance(x, ParameterSet):
            if not x.bit_equal(y):
                return False
        elif isinstance(x, np.ndarray):
            if x.dtype != y.dtype or x.shape != y.shape or x.tobytes() != y.tobytes():
                return False
        elif x != y:
            return False
    return True


# ---------------------------------------------------------------------------
# codec


def _put_tensor(out: list, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    tag = _TAGS.get(arr.dtype)
    if tag is None:
        raise CodecError(f"unsupported tensor dtype {arr.dtype}")
    if arr.ndim > 255:
        raise CodecError("tensor rank above 255")
    if any(d > _U32_MAX for d in arr.shape):
        raise CodecError(f"tensor dimension exceeds 2**32-1: {arr.shape}")
    out.append(struct.pack(f"<BB{arr.ndim}I", tag, arr.ndim, *arr.shape))
    out.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())


def _put_labels(out: list, labels) -> None:
    labels = np.asarray(labels)
    if len(labels) > _U32_MAX or (labels.size and (labels.min() < 0 or labels.max() > _U32_MAX)):
        raise CodecError("labels must fit in u32")
    out.append(struct.pack("<I", len(labels)))
    out.append(labels.astype("<u4").tobytes())


def _put_params(out: list, params: ParameterSet) -> None:
    out.append(struct.pack("<I", len(params.entries)))
    for e in params.entries:
        out.append(struct.pack("<I", e.layer_index))
        _put_tensor(out, e.weight)
        _put_tensor(out, e.bias)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise TruncatedFrame(f"payload ends at {len(self.buf)}, needed {self.pos + n}")
        view = self.buf[self.pos : self.pos + n]
        self.pos += n
        return view

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def tensor(self) -> np.ndarray:
        tag, ndim = self.unpack("BB")
        if tag not in _DTYPES:
            raise CodecError(f"unknown tensor dtype tag {tag}")
        dims = self.unpack(f"{ndim}I") if ndim else ()
        dt = _DTYPES[tag]
        count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(self.take(count * dt.itemsize), dtype=dt).reshape(dims)
        return data.astype(dt.newbyteorder("="))

    def labels(self) -> np.ndarray:
        (n,) = self.unpack("I")
        return np.frombuffer(self.take(4 * n), dtype="<u4").astype(np.int64)

    def params(self) -> ParameterSet:
        (n,) = self.unpack("I")
        entries = []
        for _ in range(n):
            (idx,) = self.unpack("I")
            entries.append(ParamEntry(idx, self.tensor(), self.tensor()))
        return ParameterSet(entries)


def encode_payload(m) -> bytes:
    out: list = []
    if isinstance(m, (ModelDown, ModelUp)):
        _put_params(out, m.params)
    elif isinstance(m, Smashed):
        out.append(struct.pack("<III", m.client_id, m.epoch, m.batch_index))
        _put_tensor(out, m.activations)
        _put_labels(out, m.labels)
    elif isinstance(m, SmashedGrad):
        out.append(struct.pack("<III", m.client_id, m.epoch, m.batch_index))
        _put_tensor(out, m.grad)
    elif isinstance(m, EvalRequest):
        out.append(struct.pack("<I", m.round))
        _put_tensor(out, m.inputs)
    elif isinstance(m, EvalReply):
        out.append(struct.pack("<I", m.round))
        _put_tensor(out, m.outputs)
    elif isinstance(m, Control):
        out.append(struct.pack("<BIQ", m.code, m.round, m.value))
    else:
        raise CodecError(f"not a message: {type(m).__name__}")
    return b"".join(out)


def encode_message(m) -> bytes:
    try:
        payload = encode_payload(m)
    except struct.error as exc:
        raise CodecError(f"field out of range: {exc}") from None
    return HEADER.pack(MAGIC, VERSION, int(m.kind), len(payload)) + payload


def parse_header(header: bytes) -> tuple[Kind, int]:
    if len(header) < HEADER_SIZE:
        raise TruncatedFrame(f"frame of {len(header)} bytes is shorter than the {HEADER_SIZE}-byte header")
    magic, version, kind, length = HEADER.unpack(header[:HEADER_SIZE])
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    try:
        kind = Kind(kind)
    except ValueError:
        raise UnknownKind(f"unknown message kind {kind}") from None
    return kind, length


def decode_message(frame: bytes):
    kind, length = parse_header(frame)
    body = len(frame) - HEADER_SIZE
    if body < length:
        raise TruncatedFrame(f"payload has {body} of {length} bytes")
    if body > length:
        raise LengthMismatch(f"{body - length} bytes beyond the declared payload")
    return decode_payload(kind, bytes(frame[HEADER_SIZE:]))


def decode_payload(kind: Kind, payload: bytes):
    r = _Reader(payload)
    if kind in (Kind.MODEL_DOWN, Kind.MODEL_UP):
        m = (ModelDown if kind == Kind.MODEL_DOWN else ModelUp)(r.params())
    elif kind == Kind.SMASHED:
        cid, ep, bi = r.unpack("III")
        m = Smashed(cid, ep, bi, r.tensor(), r.labels())
    elif kind == Kind.SMASHED_GRAD:
        cid, ep, bi = r.unpack("III")
        m = SmashedGrad(cid, ep, bi, r.tensor())
    elif kind == Kind.EVAL_REQUEST:
        m = EvalRequest(r.unpack("I")[0], r.tensor())
    elif kind == Kind.EVAL_REPLY:
        m = EvalReply(r.unpack("I")[0], r.tensor())
    else:
        m = Control(*r.unpack("BIQ"))
    if r.pos != len(payload):
        raise LengthMismatch(f"{len(payload) - r.pos} trailing payload bytes in {kind.name}")
    return m


def frame_size(m) -> int:
    return len(encode_message(m))


# ---------------------------------------------------------------------------
# endpoints


class Endpoint:
    """One side of a reliable, ordered, blocking message pipe with byte counters."""

    def __init__(self, peer: str):
        self.peer = peer
        self._lock = threading.Lock()
        self._sent = 0
        self._received = 0

    @property
    def bytes_sent(self) -> int:
        with self._lock:
            return self._sent

    @property
    def bytes_received(self) -> int:
        with self._lock:
            return self._received

    def _count(self, sent: int = 0, received: int = 0) -> None:
        with self._lock:
            self._sent += sent
            self._received += received

    def send(self, m) -> int:
        frame = encode_message(m)
        self._send_frame(frame)
        self._count(sent=len(frame))
        return len(frame)

    def recv(self):
        frame = self._recv_frame()
        self._count(received=len(frame))
        return decode_message(frame)

    def _send_frame(self, frame: bytes) -> None:
        raise NotImplementedError

    def _recv_frame(self) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass


_CLOSED = object()


class LoopbackEndpoint(Endpoint):
    def __init__(self, peer: str, inbox: queue.Queue, outbox: queue.Queue, timeout: float | None):
        super().__init__(peer)
        self._inbox = inbox
        self._outbox = outbox
        self._timeout = timeout
        self._closed = False

    def _send_frame(self, frame: bytes) -> None:
        if self._closed:
            raise PeerClosed(f"endpoint to {self.peer} is closed")
        self._outbox.put(frame)

    def _recv_frame(self) -> bytes:
        try:
            frame = self._inbox.get(timeout=self._timeout)
        except queue.Empty:
            raise TransportError(f"timed out waiting for {self.peer}") from None
        if frame is _CLOSED:
            self._inbox.put(_CLOSED)  # keep later recv calls failing too
            raise PeerClosed(f"{self.peer} closed the connection")
        return frame

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSED)


def loopback_pair(a: str = "a", b: str = "b", timeout: float | None = None):
    """Two connected in-process endpoints: (endpoint held by ``a``, endpoint held by ``b``)."""
    ab, ba = queue.Queue(), queue.Queue()
    return LoopbackEndpoint(b, ba, ab, timeout), LoopbackEndpoint(a, ab, ba, timeout)


class SocketEndpoint(Endpoint):
    def __init__(self, sock: socket.socket, peer: str | None = None):
        super().__init__(peer or str(sock.getpeername()))
        self.sock = sock
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def _recv_exact(self, n: int) -> bytes:
        chunks, got = [], 0
        while got < n:
            chunk = self.sock.recv(min(n - got, 1 << 20))
            if not chunk:
                raise PeerClosed(f"{self.peer} closed the connection")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def _send_frame(self, frame: bytes) -> None:
        try:
            self.sock.sendall(frame)
        except OSError as exc:
            raise PeerClosed(f"send to {self.peer} failed: {exc}") from exc

    def _recv_frame(self) -> bytes:
        try:
            header = self._recv_exact(HEADER_SIZE)
            _, length = parse_header(header)
            return header + self._recv_exact(length)
        except OSError as exc:
            raise PeerClosed(f"recv from {self.peer} failed: {exc}") from exc

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def connect(host: str, port: int, retries: int = 50, delay: float = 0.1) -> SocketEndpoint:
    """Connect to a listening server, retrying while it starts up."""
    last = None
    for _ in range(retries):
        try:
            return SocketEndpoint(socket.create_connection((host, port)), f"{host}:{port}")
        except OSError as exc:
            last = exc
            time.sleep(delay)
    raise TransportError(f"could not connect to {host}:{port}: {last}")


def listen(host: str, port: int, backlog: int = 128) -> socket.socket:
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(backlog)
    return srv


def accept(srv: socket.socket, timeout: float | None = None) -> SocketEndpoint:
    srv.settimeout(timeout)
    try:
        conn, addr = srv.accept()
    except socket.timeout:
        raise TransportError(f"no client connected within {timeout} s") from None
    conn.settimeout(None)
    return SocketEndpoint(conn, f"{addr[0]}:{addr[1]}")
