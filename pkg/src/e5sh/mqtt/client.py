from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

from e5sh.mqtt.broker import DEFAULT_RETRY_CAP, DEFAULT_RETRY_TIMEOUT_NS
from e5sh.mqtt.packet import MalformedPacket, MqttPacket, PacketReader, PacketType, encode_packet
from e5sh.transport import Connection

logger = logging.getLogger(__name__)


@dataclass
class _Pending:
    packet: MqttPacket
    deadline: int
    retries: int = 0


class MqttClient:
    """Client session over one connection.

    CONNECT, SUBSCRIBE and QoS1 PUBLISH are retried until acknowledged
    (PUBLISH retries carry dup=1); ``on_message(packet)`` sees every
    inbound PUBLISH, duplicates included.
    """

    def __init__(self, client_id: str, conn: Connection,
                 on_message: Callable[[MqttPacket], None] | None = None,
                 retry_timeout_ns: int = DEFAULT_RETRY_TIMEOUT_NS,
                 retry_cap: int | None = DEFAULT_RETRY_CAP, scheduler=None, clock=None):
        self.client_id = client_id
        self.conn = conn
        self.on_message = on_message or (lambda p: None)
        self.retry_timeout_ns = int(retry_timeout_ns)
        self.retry_cap = retry_cap
        self.scheduler = scheduler
        self.clock = clock if clock is not None else (scheduler.clock if scheduler is not None else None)
        self.connected = False
        self.subscribed: dict[str, int] = {}
        self.pending: dict[int, _Pending] = {}
        self._connect_pending: _Pending | None = None
        self._next_pid = 1
        self._reader = PacketReader()
        self.counters = {"published": 0, "received": 0, "duplicates": 0, "retransmitted": 0,
                         "retry_exhausted": 0, "acked": 0}
        self.on_connect: Callable[[], None] = lambda: None
        self.on_suback: Callable[[str], None] = lambda filt: None
        conn.on_bytes = self._on_bytes

    def _now(self) -> int:
        return self.clock.now() if self.clock is not None else 0

    def _pid(self) -> int:
        for _ in range(0xFFFF):
            pid = self._next_pid
            self._next_pid = pid % 0xFFFF + 1
            if pid not in self.pending:
                return pid
        raise RuntimeError("no free packet id")

    def _send(self, p: MqttPacket) -> None:
        self.conn.send(encode_packet(p))

    def _arm(self, due: int) -> None:
        if self.scheduler is not None:
            self.scheduler.call_at(due, self._on_timer, label=f"{self.client_id}-retry")

    def _on_timer(self) -> None:
        self.retransmit(self.scheduler.now)

    def connect(self) -> None:
        p = MqttPacket(PacketType.CONNECT, client_id=self.client_id)
        due = self._now() + self.retry_timeout_ns
        self._connect_pending = _Pending(p, due)
        self._send(p)
        self._arm(due)

    def subscribe(self, filt: str, qos: int = 1) -> int:
        pid = self._pid()
        p = MqttPacket(PacketType.SUBSCRIBE, packet_id=pid, filters=[(filt, qos)])
        due = self._now() + self.retry_timeout_ns
        self.pending[pid] = _Pending(p, due)
        self._send(p)
        self._arm(due)
        return pid

    def publish(self, topic: str, payload: bytes, qos: int = 0) -> int | None:
        self.counters["published"] += 1
        if qos == 0:
            self._send(MqttPacket(PacketType.PUBLISH, topic=topic, payload=payload))
            return None
        pid = self._pid()
        p = MqttPacket(PacketType.PUBLISH, qos=1, packet_id=pid, topic=topic, payload=payload)
        due = self._now() + self.retry_timeout_ns
        self.pending[pid] = _Pending(p, due)
        self._send(p)
        self._arm(due)
        return pid

    def disconnect(self) -> None:
        self._send(MqttPacket(PacketType.DISCONNECT))
        self.connected = False

    def retransmit(self, now: int) -> int:
        n = 0
        cp = self._connect_pending
        if cp is not None and cp.deadline <= now:
            cp.deadline = now + self.retry_timeout_ns
            self._send(cp.packet)
            self._arm(cp.deadline)
            n += 1
        for pid, entry in sorted(self.pending.items()):
            if entry.deadline > now:
                continue
            if self.retry_cap is not None and entry.retries >= self.retry_cap:
                del self.pending[pid]
                self.counters["retry_exhausted"] += 1
                continue
            entry.retries += 1
            entry.deadline = now + self.retry_timeout_ns
            if entry.packet.packet_type == PacketType.PUBLISH:
                entry.packet = entry.packet.with_(dup=True)
            self.counters["retransmitted"] += 1
            self._send(entry.packet)
            self._arm(entry.deadline)
            n += 1
        return n

    def _on_bytes(self, data: bytes) -> None:
        try:
            packets = self._reader.feed(data)
        except MalformedPacket as exc:
            logger.warning("%s: malformed packet: %s", self.client_id, exc)
            return
        for p in packets:
            self._handle(p)

    def _handle(self, p: MqttPacket) -> None:
        t = p.packet_type
        if t == PacketType.CONNACK:
            if self._connect_pending is not None:
                self._connect_pending = None
                self.connected = True
                self.on_connect()
        elif t == PacketType.PUBLISH:
            if p.qos == 1:
                self._send(MqttPacket(PacketType.PUBACK, packet_id=p.packet_id))
            self.counters["received"] += 1
            if p.dup:
                self.counters["duplicates"] += 1
            self.on_message(p)
        elif t == PacketType.PUBACK:
            if self.pending.pop(p.packet_id, None) is not None:
                self.counters["acked"] += 1
        elif t == PacketType.SUBACK:
            entry = self.pending.pop(p.packet_id, None)
            if entry is not None:
                for filt, _ in entry.packet.filters:
                    self.subscribed[filt] = p.return_codes[0] if p.return_codes else 0
                    self.on_suback(filt)
