"""TCPROS-style transport: connection-header handshake and length-prefixed
messages over a reliable ordered stream.

Header wire format::

    u32 total_len | { u32 field_len | "key=value" } ...

Required fields come first in the order callerid, topic, type, md5sum;
any others follow sorted by key.
"""

from __future__ import annotations

import hashlib
import logging
import struct
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Mapping

from e5sh.transport import Connection, ConnectionClosed

logger = logging.getLogger(__name__)

REQUIRED_KEYS = ("callerid", "topic", "type", "md5sum")
MAX_MESSAGE = 64 * 1024 * 1024
DEFAULT_QUEUE_DEPTH = 30

_U32 = struct.Struct("<I")


class TcprosError(Exception):
    pass


class HeaderError(TcprosError, ValueError):
    pass


class TruncationError(HeaderError):
    pass


class MalformedFieldError(HeaderError):
    pass


class FramingError(TcprosError, ValueError):
    pass


class HandshakeError(TcprosError):
    pass


class DeliveryError(TcprosError):
    pass


def md5sum_for(type_name: str) -> str:
    return hashlib.md5(type_name.encode("ascii")).hexdigest()


def _ordered_keys(h: Mapping[str, str]) -> list[str]:
    head = [k for k in REQUIRED_KEYS if k in h]
    return head + sorted(k for k in h if k not in REQUIRED_KEYS)


def encode_fields(h: Mapping[str, str]) -> bytes:
    """Encode any key/value map (no required-key check), e.g. error replies."""
    body = []
    for key in _ordered_keys(h):
        if "=" in key:
            raise HeaderError(f"key {key!r} contains '='")
        f = f"{key}={h[key]}".encode("ascii")
        body.append(_U32.pack(len(f)) + f)
    payload = b"".join(body)
    return _U32.pack(len(payload)) + payload


def encode_header(h: Mapping[str, str]) -> bytes:
    missing = [k for k in REQUIRED_KEYS if k not in h]
    if missing:
        raise HeaderError(f"missing required header key(s): {', '.join(missing)}")
    return encode_fields(h)


def decode_header(data: bytes) -> dict[str, str]:
    if len(data) < 4:
        raise TruncationError("no header length")
    (total,) = _U32.unpack_from(data, 0)
    if len(data) - 4 < total:
        raise TruncationError(f"header declares {total} bytes, {len(data) - 4} present")
    out: dict[str, str] = {}
    pos, end = 4, 4 + total
    while pos < end:
        if end - pos < 4:
            raise TruncationError("field length runs past the header")
        (n,) = _U32.unpack_from(data, pos)
        pos += 4
        if pos + n > end:
            raise TruncationError("field runs past the declared header length")
        raw = bytes(data[pos:pos + n])
        pos += n
        try:
            text = raw.decode("ascii")
        except UnicodeDecodeError:
            raise MalformedFieldError("non-ASCII header field") from None
        if "=" not in text:
            raise MalformedFieldError(f"field {text!r} has no '='")
        key, value = text.split("=", 1)
        if key in out:
            raise MalformedFieldError(f"duplicate key {key!r}")
        out[key] = value
    return out


def frame_message(payload: bytes) -> bytes:
    if len(payload) > MAX_MESSAGE:
        raise FramingError(f"message of {len(payload)} bytes exceeds {MAX_MESSAGE}")
    return _U32.pack(len(payload)) + bytes(payload)


class FrameReader:
    """Reassemble length-prefixed records from an arbitrary chunking."""

    def __init__(self, limit: int = MAX_MESSAGE):
        self._buf = bytearray()
        self.limit = limit

    def feed(self, data: bytes) -> list[bytes]:
        self._buf += data
        out = []
        while len(self._buf) >= 4:
            (n,) = _U32.unpack_from(self._buf, 0)
            if n > self.limit:
                raise FramingError(f"incoming record of {n} bytes exceeds limit")
            if len(self._buf) < 4 + n:
                break
            out.append(bytes(self._buf[4:4 + n]))
            del self._buf[:4 + n]
        return out


@dataclass
class TcprosEndpoint:
    role: str  # "publisher" | "subscriber"
    topic: str
    peer: str
    header: dict = field(default_factory=dict)


def _mismatch(mine: Mapping[str, str], theirs: Mapping[str, str]) -> str | None:
    for key in ("topic", "type", "md5sum"):
        if key not in theirs:
            return f"peer header lacks {key}"
        if mine[key] != theirs[key] and theirs[key] != "*":
            return f"{key} mismatch: {theirs[key]!r} != {mine[key]!r}"
    return None


class _PubLink:
    def __init__(self, conn: Connection):
        self.conn = conn
        self.reader = FrameReader(limit=1 << 16)
        self.endpoint: TcprosEndpoint | None = None


class TcprosPublisher:
    """Accepts subscriber connections for one topic and fans messages out."""

    def __init__(self, topic: str, msg_type: str, callerid: str = "/publisher"):
        if not topic:
            raise ValueError("topic must be non-empty")
        self.header = {"callerid": callerid, "topic": topic, "type": msg_type,
                       "md5sum": md5sum_for(msg_type)}
        self.topic = topic
        self._lock = threading.Lock()
        self._subscribers: list[_PubLink] = []
        self.rejected: list[str] = []
        self.published = 0

    @property
    def endpoints(self) -> list[TcprosEndpoint]:
        with self._lock:
            return [s.endpoint for s in self._subscribers]

    def accept(self, conn: Connection) -> None:
        link = _PubLink(conn)
        conn.on_bytes = lambda data: self._on_handshake(link, data)
        conn.on_close = lambda: self._drop(link)

    def _on_handshake(self, link: _PubLink, data: bytes) -> None:
        if link.endpoint is not None:
            return  # subscribers send nothing after the handshake
        link.reader._buf += data
        buf = link.reader._buf
        if len(buf) < 4 or len(buf) < 4 + _U32.unpack_from(buf, 0)[0]:
            return
        try:
            theirs = decode_header(bytes(buf))
        except HeaderError as exc:
            self._reject(link, str(exc))
            return
        buf.clear()
        reason = _mismatch(self.header, theirs)
        if reason:
            self._reject(link, reason)
            return
        link.conn.send(encode_header(self.header))
        link.endpoint = TcprosEndpoint("publisher", self.topic, theirs.get("callerid", "?"), theirs)
        with self._lock:
            self._subscribers.append(link)

    def _reject(self, link: _PubLink, reason: str) -> None:
        logger.info("rejecting subscriber on %s: %s", self.topic, reason)
        self.rejected.append(reason)
        try:
            link.conn.send(encode_fields({"error": reason}))
        finally:
            link.conn.close()

    def _drop(self, link: _PubLink) -> None:
        with self._lock:
            if link in self._subscribers:
                self._subscribers.remove(link)

    def publish(self, payload: bytes) -> int:
        """Send to every connected subscriber; returns the delivery count."""
        record = frame_message(payload)
        with self._lock:
            targets = list(self._subscribers)
        failed = []
        for link in targets:
            try:
                link.conn.send(record)
            except (ConnectionClosed, ConnectionError) as exc:
                failed.append((link, exc))
        for link, _ in failed:
            self._drop(link)
        self.published += 1
        if failed:
            raise DeliveryError(f"{len(failed)} subscriber connection(s) reset on {self.topic}")
        return len(targets)


class TcprosSubscriber:
    """Client side of one topic connection."""

    def __init__(self, topic: str, msg_type: str, on_message: Callable[[bytes], None],
                 callerid: str = "/subscriber", queue_depth: int = DEFAULT_QUEUE_DEPTH,
                 on_error: Callable[[Exception], None] | None = None):
        if not topic:
            raise ValueError("topic must be non-empty")
        self.header = {"callerid": callerid, "topic": topic, "type": msg_type,
                       "md5sum": md5sum_for(msg_type)}
        self.topic = topic
        self.on_message = on_message
        self.on_error = on_error
        self.queue: deque[bytes] = deque(maxlen=queue_depth)
        self.overflow = 0
        self.received = 0
        self.endpoint: TcprosEndpoint | None = None
        self.error: Exception | None = None
        self._reader = FrameReader()
        self._handshaken = False
        self._conn: Connection | None = None

    @property
    def connected(self) -> bool:
        return self.endpoint is not None and self._conn is not None and not self._conn.closed

    def connect(self, conn: Connection) -> "TcprosSubscriber":
        self._conn = conn
        conn.on_bytes = self._on_bytes
        conn.send(encode_header(self.header))
        return self

    def _fail(self, exc: Exception) -> None:
        self.error = exc
        if self._conn is not None:
            self._conn.close()
        if self.on_error:
            self.on_error(exc)

    def _on_bytes(self, data: bytes) -> None:
        if not self._handshaken:
            buf = self._reader._buf
            buf += data
            if len(buf) < 4 or len(buf) < 4 + _U32.unpack_from(buf, 0)[0]:
                return
            n = 4 + _U32.unpack_from(buf, 0)[0]
            try:
                theirs = decode_header(bytes(buf[:n]))
            except HeaderError as exc:
                self._fail(HandshakeError(str(exc)))
                return
            del buf[:n]
            if "error" in theirs:
                self._fail(HandshakeError(theirs["error"]))
                return
            reason = _mismatch(self.header, theirs)
            if reason:
                self._fail(HandshakeError(reason))
                return
            self._handshaken = True
            self.endpoint = TcprosEndpoint("subscriber", self.topic,
                                           theirs.get("callerid", "?"), theirs)
            data = b""
        for msg in self._reader.feed(data):
            if len(self.queue) == self.queue.maxlen:
                self.overflow += 1
            self.queue.append(msg)
            self._drain()

    def _drain(self) -> None:
        while self.queue:
            msg = self.queue.popleft()
            self.received += 1
            self.on_message(msg)


def subscribe(topic: str, msg_type: str, on_message: Callable[[bytes], None],
              conn: Connection, **kwargs) -> TcprosSubscriber:
    return TcprosSubscriber(topic, msg_type, on_message, **kwargs).connect(conn)
