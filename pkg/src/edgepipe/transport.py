"""
Framed point-to-point messaging between pipeline stages.

Frame layout (all integers little-endian)::

    "CFDT" | proto u8 = 1 | msg_type u8 | batch_id u32 | version u32 | n_tensors u16
    | per tensor: rank u8, dims u32 * rank, precision u8 (4|8), raw scalars
    | crc32 u32   (over every preceding byte of the frame)

Two link types share one API (``send``, ``recv``, ``close``): an in-process
loopback pair that still round-trips every message through the codec, and a
TCP stream link with a background reader thread.
"""

from __future__ import annotations

import enum
import io
import json
import queue
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from typing import BinaryIO, Iterator, Optional

import numpy as np

from .errors import CrcMismatch, Oversize, ProtocolError, Timeout, TransportClosed

MAGIC = b"CFDT"
PROTOCOL_VERSION = 1
MAX_TENSOR_BYTES = 2**31

_HEADER = struct.Struct("<4sBBIIH")
HEADER_SIZE = _HEADER.size  # 16
CRC_SIZE = 4

_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class MsgType(enum.IntEnum):
    ACTIVATION = 1
    GRADIENT = 2
    CONTROL = 3
    WEIGHTS = 4


class Control(enum.IntEnum):
    """Control codes, carried in the batch_id field of CONTROL frames."""

    START = 0
    STOP = 1
    PARTITION = 2
    CAPACITY = 3
    PLAN = 4
    PROFILE = 5
    EPOCH_DONE = 6


@dataclass(eq=False)
class PipeMessage:
    msg_type: MsgType
    batch_id: int = 0
    version: int = 0
    tensors: list[np.ndarray] = field(default_factory=list)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PipeMessage):
            return NotImplemented
        return (
            self.msg_type == other.msg_type
            and self.batch_id == other.batch_id
            and self.version == other.version
            and len(self.tensors) == len(other.tensors)
            and all(
                a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
                for a, b in zip(self.tensors, other.tensors)
            )
        )

    def __repr__(self) -> str:
        shapes = [t.shape for t in self.tensors]
        return f"PipeMessage({self.msg_type.name}, batch={self.batch_id}, version={self.version}, tensors={shapes})"


def control_message(code: Control, doc: Optional[dict] = None, version: int = 0) -> PipeMessage:
    """CONTROL frame; an optional JSON document rides along as one float32 value per byte."""
    tensors = []
    if doc is not None:
        raw = np.frombuffer(json.dumps(doc, sort_keys=True).encode(), dtype=np.uint8)
        tensors.append(raw.astype(np.float32))
    return PipeMessage(MsgType.CONTROL, int(code), version, tensors)


def control_doc(msg: PipeMessage) -> Optional[dict]:
    if not msg.tensors:
        return None
    return json.loads(msg.tensors[0].astype(np.uint8).tobytes().decode())


def _tensor_bytes(arr: np.ndarray) -> bytes:
    if arr.dtype not in (np.float32, np.float64):
        raise ProtocolError(f"only float32/float64 tensors can be framed, got {arr.dtype}")
    if arr.nbytes > MAX_TENSOR_BYTES:
        raise Oversize(f"tensor of {arr.nbytes} bytes exceeds 2^31")
    if arr.ndim > 255:
        raise Oversize("tensor rank exceeds 255")
    precision = arr.dtype.itemsize
    head = struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<B", precision)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[precision]).tobytes()


def encode_tensor(arr: np.ndarray) -> bytes:
    return _tensor_bytes(np.asarray(arr))


def encode(m: PipeMessage) -> bytes:
    if len(m.tensors) > 0xFFFF:
        raise Oversize("more than 65535 tensors in one frame")
    if not (0 <= m.batch_id < 2**32 and 0 <= m.version < 2**32):
        raise Oversize("batch_id and version must fit in u32")
    body = bytearray(_HEADER.pack(MAGIC, PROTOCOL_VERSION, int(m.msg_type), m.batch_id, m.version, len(m.tensors)))
    for t in m.tensors:
        body += _tensor_bytes(np.asarray(t))
    body += struct.pack("<I", zlib.crc32(body))
    return bytes(body)


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = stream.read(n)
    if buf is None or len(buf) < n:
        raise EOFError(f"stream ended after {0 if buf is None else len(buf)} of {n} bytes")
    return buf


def read_tensor(stream: BinaryIO, raw: Optional[bytearray] = None) -> np.ndarray:
    def take(n):
        chunk = _read_exact(stream, n)
        if raw is not None:
            raw.extend(chunk)
        return chunk

    (rank,) = struct.unpack("<B", take(1))
    dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
    (precision,) = struct.unpack("<B", take(1))
    if precision not in _DTYPES:
        raise ProtocolError(f"unknown precision {precision}")
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    nbytes = count * precision
    if nbytes > MAX_TENSOR_BYTES:
        raise Oversize("tensor payload exceeds 2^31 bytes")
    data = np.frombuffer(take(nbytes), dtype=_DTYPES[precision]).reshape(dims)
    return data.astype(data.dtype.newbyteorder("="), copy=True)


def read_frame(stream: BinaryIO) -> PipeMessage:
    """Read exactly one frame from a byte stream.

    Raises EOFError at a clean end of stream, ProtocolError on a malformed
    frame and CrcMismatch when the checksum disagrees (the frame's bytes are
    consumed either way, so the stream stays aligned).
    """
    first = stream.read(HEADER_SIZE)
    if not first:
        raise EOFError("end of stream")
    if len(first) < HEADER_SIZE:
        raise ProtocolError("truncated frame header")
    raw = bytearray(first)
    magic, proto, mtype, batch_id, version, count = _HEADER.unpack(first)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if proto != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {proto}")
    try:
        tensors = [read_tensor(stream, raw) for _ in range(count)]
        (crc,) = struct.unpack("<I", _read_exact(stream, CRC_SIZE))
    except EOFError as exc:
        raise ProtocolError(f"truncated frame: {exc}") from exc
    if zlib.crc32(raw) != crc:
        raise CrcMismatch(f"crc mismatch on frame (batch {batch_id})")
    try:
        kind = MsgType(mtype)
    except ValueError:
        raise ProtocolError(f"unknown msg_type {mtype}") from None
    return PipeMessage(kind, batch_id, version, tensors)


def decode(frame: bytes) -> PipeMessage:
    stream = io.BytesIO(frame)
    msg = read_frame(stream)
    if stream.read(1):
        raise ProtocolError("trailing bytes after frame")
    return msg


def decode_stream(data: bytes) -> Iterator[PipeMessage]:
    """Split a concatenation of frames back into messages."""
    stream = io.BytesIO(data)
    while True:
        try:
            yield read_frame(stream)
        except EOFError:
            return


# ---------------------------------------------------------------------------
# Links
# ---------------------------------------------------------------------------

_CLOSED = object()


class Link:
    """One endpoint of a bidirectional, ordered, reliable channel."""

    def __init__(self):
        self._inbox: queue.Queue = queue.Queue()
        self._closed = threading.Event()

    def send(self, m: PipeMessage) -> None:
        raise NotImplementedError

    def recv(self, timeout: Optional[float] = None) -> PipeMessage:
        if self._closed.is_set() and self._inbox.empty():
            raise TransportClosed("link is closed")
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise Timeout(f"no message within {timeout}s") from None
        if item is _CLOSED:
            self._inbox.put(_CLOSED)  # keep later recv calls failing too
            raise TransportClosed("peer closed the link")
        if isinstance(item, Exception):
            raise item
        return item

    def close(self) -> None:
        raise NotImplementedError

    @property
    def closed(self) -> bool:
        return self._closed.is_set()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class LoopbackLink(Link):
    def __init__(self):
        super().__init__()
        self.peer: Optional[LoopbackLink] = None

    def send(self, m: PipeMessage) -> None:
        if self._closed.is_set() or self.peer is None or self.peer._closed.is_set():
            raise TransportClosed("link is closed")
        self.peer._deliver(encode(m))

    def _deliver(self, frame: bytes) -> None:
        try:
            self._inbox.put(decode(frame))
        except (CrcMismatch, ProtocolError) as exc:
            self._inbox.put(exc)

    def inject_raw(self, frame: bytes) -> None:
        """Deliver raw bytes to this endpoint as if they came off the wire (testing aid)."""
        self._deliver(frame)

    def close(self) -> None:
        if self._closed.is_set():
            return
        self._closed.set()
        self._inbox.put(_CLOSED)
        if self.peer is not None and not self.peer._closed.is_set():
            self.peer._closed.set()
            self.peer._inbox.put(_CLOSED)


def loopback_pair() -> tuple[LoopbackLink, LoopbackLink]:
    a, b = LoopbackLink(), LoopbackLink()
    a.peer, b.peer = b, a
    return a, b


class StreamLink(Link):
    """Link over a connected stream socket."""

    def __init__(self, sock: socket.socket):
        super().__init__()
        if sock.family in (socket.AF_INET, socket.AF_INET6):
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self._send_lock = threading.Lock()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self) -> None:
        stream = self._sock.makefile("rb")
        try:
            while True:
                try:
                    self._inbox.put(read_frame(stream))
                except CrcMismatch as exc:
                    self._inbox.put(exc)
        except (EOFError, OSError, ValueError):
            pass
        except ProtocolError as exc:
            self._inbox.put(exc)
        finally:
            self._closed.set()
            self._inbox.put(_CLOSED)

    def send(self, m: PipeMessage) -> None:
        if self._closed.is_set():
            raise TransportClosed("link is closed")
        frame = encode(m)
        try:
            with self._send_lock:
                self._sock.sendall(frame)
        except OSError as exc:
            raise TransportClosed(str(exc)) from exc

    def send_raw(self, data: bytes) -> None:
        with self._send_lock:
            self._sock.sendall(data)

    def close(self) -> None:
        if self._closed.is_set() and self._sock.fileno() == -1:
            return
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
        self._closed.set()


def stream_pair() -> tuple[StreamLink, StreamLink]:
    a, b = socket.socketpair()
    return StreamLink(a), StreamLink(b)


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, _, port = endpoint.rpartition(":")
    return host or "127.0.0.1", int(port)


def connect(endpoint: str, timeout: float = 30.0) -> StreamLink:
    """Connect to ``host:port``, retrying until the listener appears or ``timeout`` passes."""
    host, port = parse_endpoint(endpoint)
    deadline = time.monotonic() + timeout
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=5.0)
            sock.settimeout(None)
            return StreamLink(sock)
        except OSError:
            if time.monotonic() > deadline:
                raise TransportClosed(f"could not reach {endpoint}") from None
            time.sleep(0.05)


class Listener:
    def __init__(self, endpoint: str):
        host, port = parse_endpoint(endpoint)
        self._sock = socket.create_server((host, port), reuse_port=False)

    @property
    def port(self) -> int:
        return self._sock.getsockname()[1]

    def accept(self, timeout: Optional[float] = 30.0) -> StreamLink:
        self._sock.settimeout(timeout)
        try:
            conn, _ = self._sock.accept()
        except socket.timeout:
            raise Timeout("no peer connected") from None
        conn.settimeout(None)
        return StreamLink(conn)

    def close(self) -> None:
        self._sock.close()
