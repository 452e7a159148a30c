"""Byte-stream connections shared by both protocols.

A connection delivers opaque byte chunks to whatever callback the protocol
layer installs in ``on_bytes``. ``SimConnection`` rides on emulated links;
``StreamConnection`` wraps an asyncio stream for loopback runs.
"""

from __future__ import annotations

import asyncio
import logging
from typing import Callable

from e5sh.netem import Link

logger = logging.getLogger(__name__)


class ConnectionClosed(ConnectionError):
    pass


class Connection:
    def __init__(self, name: str = ""):
        self.name = name
        self.closed = False
        self.on_bytes: Callable[[bytes], None] = lambda data: None
        self.on_close: Callable[[], None] = lambda: None
        # hook for byte accounting: (data) -> (nbytes, tag)
        self.meter: Callable[[bytes], tuple[int | None, object]] | None = None

    def send(self, data: bytes) -> None:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class SimConnection(Connection):
    """One end of a duplex channel over a pair of emulated links."""

    def __init__(self, out_link: Link, name: str = ""):
        super().__init__(name)
        self.out_link = out_link
        self.peer: SimConnection | None = None

    @classmethod
    def pair(cls, a_to_b: Link, b_to_a: Link, names=("a", "b")):
        a = cls(a_to_b, names[0])
        b = cls(b_to_a, names[1])
        a.peer, b.peer = b, a
        return a, b

    def send(self, data: bytes) -> None:
        if self.closed:
            raise ConnectionClosed(f"{self.name}: connection closed")
        nbytes, tag = self.meter(data) if self.meter else (None, None)
        peer = self.peer
        self.out_link.send(bytes(data), lambda d: peer._receive(d), nbytes=nbytes, tag=tag)

    def _receive(self, data: bytes) -> None:
        if not self.closed:
            self.on_bytes(data)

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        peer = self.peer
        # the close notification travels like data so it cannot overtake it
        self.out_link.send(b"", lambda d: peer._remote_closed())
        self.on_close()

    def _remote_closed(self) -> None:
        if not self.closed:
            self.closed = True
            self.on_close()


class StreamConnection(Connection):
    """asyncio stream adapter; call ``start()`` to begin reading."""

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter,
                 name: str = "", delay: Callable[[], float] | None = None):
        super().__init__(name)
        self.reader = reader
        self.writer = writer
        self._task: asyncio.Task | None = None
        # sender-side delay injection keeps FIFO via a single queue
        self._delay = delay
        self._outq: asyncio.Queue | None = None
        self._sender: asyncio.Task | None = None
        self.bytes_sent = 0
        self.tagged_bytes: dict = {}

    def start(self) -> None:
        self._task = asyncio.ensure_future(self._read_loop())
        if self._delay is not None:
            self._outq = asyncio.Queue()
            self._sender = asyncio.ensure_future(self._send_loop())

    async def _read_loop(self):
        try:
            while True:
                data = await self.reader.read(65536)
                if not data:
                    break
                self.on_bytes(data)
        except (ConnectionError, asyncio.CancelledError):
            pass
        finally:
            if not self.closed:
                self.closed = True
                self.on_close()

    async def _send_loop(self):
        loop = asyncio.get_running_loop()
        last = 0.0
        while True:
            t_enq, data = await self._outq.get()
            due = max(t_enq + self._delay(), last)
            last = due
            wait = due - loop.time()
            if wait > 0:
                await asyncio.sleep(wait)
            if self.closed:
                return
            self.writer.write(data)

    def send(self, data: bytes) -> None:
        if self.closed or self.writer.is_closing():
            raise ConnectionClosed(f"{self.name}: connection closed")
        nbytes, tag = self.meter(data) if self.meter else (None, None)
        nbytes = len(data) if nbytes is None else nbytes
        self.bytes_sent += nbytes
        if tag is not None:
            self.tagged_bytes[tag] = self.tagged_bytes.get(tag, 0) + nbytes
        if self._outq is not None:
            self._outq.put_nowait((asyncio.get_running_loop().time(), bytes(data)))
        else:
            self.writer.write(bytes(data))

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        for t in (self._task, self._sender):
            if t is not None:
                t.cancel()
        self.writer.close()
        self.on_close()
