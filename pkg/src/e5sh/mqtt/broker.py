"""Clean-session MQTT broker with QoS1 retransmission.

The broker is transport-agnostic: attach a ``Connection`` per client and
drive time either through an ``EventScheduler`` (simulation) or by calling
``qos1_retransmit`` periodically (live).
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable

from e5sh.mqtt.packet import (MalformedPacket, MqttPacket, PacketReader, PacketType,
                              encode_packet, topic_matches)
from e5sh.transport import Connection, ConnectionClosed

logger = logging.getLogger(__name__)

DEFAULT_RETRY_TIMEOUT_NS = 200_000_000
DEFAULT_RETRY_CAP = 10


@dataclass
class InFlight:
    packet: MqttPacket
    deadline: int
    retries: int = 0


@dataclass
class Session:
    client_id: str
    send: Callable[[bytes], None]
    connected: bool = True
    inflight: dict[int, InFlight] = field(default_factory=dict)
    next_pid: int = 1
    # recently acked inbound QoS1 ids, so dup retransmissions are not re-routed
    recent_in: dict[int, int] = field(default_factory=dict)

    def allocate_pid(self) -> int:
        for _ in range(0xFFFF):
            pid = self.next_pid
            self.next_pid = pid % 0xFFFF + 1
            if pid not in self.inflight:
                return pid
        raise RuntimeError(f"no free packet id for {self.client_id}")


@dataclass(frozen=True)
class Delivery:
    client_id: str
    packet: MqttPacket


class Broker:
    def __init__(self, retry_timeout_ns: int = DEFAULT_RETRY_TIMEOUT_NS,
                 retry_cap: int | None = DEFAULT_RETRY_CAP, scheduler=None, clock=None):
        self.retry_timeout_ns = int(retry_timeout_ns)
        self.retry_cap = retry_cap
        self.scheduler = scheduler
        self.clock = clock if clock is not None else (scheduler.clock if scheduler is not None else None)
        self.sessions: dict[str, Session] = {}
        self.subscriptions: dict[str, dict[str, int]] = {}
        self._lock = threading.RLock()
        self.counters = {"published": 0, "routed": 0, "dropped_no_match": 0,
                         "dropped_disconnected": 0, "retry_exhausted": 0,
                         "retransmitted": 0, "duplicates_in": 0, "malformed": 0}

    def _now(self) -> int:
        return self.clock.now() if self.clock is not None else 0

    def attach(self, conn: Connection) -> None:
        """Serve one client connection."""
        reader = PacketReader()
        state = {"session": None}

        def on_bytes(data: bytes):
            try:
                packets = reader.feed(data)
            except MalformedPacket as exc:
                self.counters["malformed"] += 1
                logger.warning("malformed packet from %s: %s", conn.name, exc)
                conn.close()
                return
            for p in packets:
                state["session"] = self.handle(state["session"], p, conn)

        def on_close():
            s = state["session"]
            if s is not None:
                s.connected = False

        conn.on_bytes = on_bytes
        conn.on_close = on_close

    def _sender(self, conn: Connection):
        def send(data: bytes):
            conn.send(data)
        return send

    def handle(self, session: Session | None, p: MqttPacket, conn: Connection) -> Session | None:
        t = p.packet_type
        if t == PacketType.CONNECT:
            with self._lock:
                old = self.sessions.get(p.client_id)
                if old is not None:
                    self._forget(old)
                session = Session(p.client_id, self._sender(conn))
                self.sessions[p.client_id] = session
            conn.send(encode_packet(MqttPacket(PacketType.CONNACK, return_codes=(0,))))
            return session
        if session is None:
            self.counters["malformed"] += 1
            conn.close()
            return None
        now = self._now()
        if t == PacketType.PUBLISH:
            if p.qos == 1:
                seen = p.packet_id in session.recent_in
                session.recent_in[p.packet_id] = now
                self._safe_send(session, MqttPacket(PacketType.PUBACK, packet_id=p.packet_id))
                self._prune_recent(session, now)
                if p.dup and seen:
                    self.counters["duplicates_in"] += 1
                    return session
            if not session.connected:
                self.counters["dropped_disconnected"] += 1
                return session
            self.broker_route(p)
        elif t == PacketType.PUBACK:
            session.inflight.pop(p.packet_id, None)
        elif t == PacketType.SUBSCRIBE:
            codes = []
            with self._lock:
                for filt, qos in p.filters:
                    granted = min(int(qos), 1)
                    self.subscriptions.setdefault(filt, {})[session.client_id] = granted
                    codes.append(granted)
            self._safe_send(session, MqttPacket(PacketType.SUBACK, packet_id=p.packet_id,
                                                return_codes=codes))
        elif t == PacketType.PINGREQ:
            self._safe_send(session, MqttPacket(PacketType.PINGRESP))
        elif t == PacketType.DISCONNECT:
            with self._lock:
                self._forget(session)
            return None
        return session

    def _prune_recent(self, session: Session, now: int) -> None:
        horizon = 20 * self.retry_timeout_ns
        if len(session.recent_in) > 256:
            for pid in [k for k, t in session.recent_in.items() if now - t > horizon]:
                del session.recent_in[pid]

    def _forget(self, session: Session) -> None:
        session.connected = False
        session.inflight.clear()
        for subs in self.subscriptions.values():
            subs.pop(session.client_id, None)
        if self.sessions.get(session.client_id) is session:
            del self.sessions[session.client_id]

    def _safe_send(self, session: Session, p: MqttPacket) -> bool:
        try:
            session.send(encode_packet(p))
            return True
        except (ConnectionClosed, ConnectionError):
            session.connected = False
            return False

    def broker_route(self, publish: MqttPacket) -> list[Delivery]:
        """Deliver ``publish`` to every matching subscriber (at most once each)."""
        self.counters["published"] += 1
        with self._lock:
            targets: dict[str, int] = {}
            for filt, subs in self.subscriptions.items():
                if topic_matches(filt, publish.topic):
                    for cid, qos in subs.items():
                        targets[cid] = max(targets.get(cid, 0), qos)
            sessions = {cid: self.sessions.get(cid) for cid in targets}
        if not targets:
            self.counters["dropped_no_match"] += 1
            return []
        now = self._now()
        out = []
        for cid in sorted(targets):
            s = sessions[cid]
            if s is None or not s.connected:
                self.counters["dropped_disconnected"] += 1
                continue
            qos = min(publish.qos, targets[cid])
            if qos == 1:
                pkt = MqttPacket(PacketType.PUBLISH, qos=1, packet_id=s.allocate_pid(),
                                 topic=publish.topic, payload=publish.payload)
                s.inflight[pkt.packet_id] = InFlight(pkt, now + self.retry_timeout_ns)
                self._arm(now + self.retry_timeout_ns)
            else:
                pkt = MqttPacket(PacketType.PUBLISH, topic=publish.topic, payload=publish.payload)
            if self._safe_send(s, pkt):
                self.counters["routed"] += 1
                out.append(Delivery(cid, pkt))
        return out

    def _arm(self, due: int) -> None:
        if self.scheduler is not None:
            self.scheduler.call_at(due, self._on_timer, label="broker-retry")

    def _on_timer(self) -> None:
        self.qos1_retransmit(self.scheduler.now)

    @property
    def inflight_count(self) -> int:
        return sum(len(s.inflight) for s in self.sessions.values())

    def qos1_retransmit(self, now: int) -> list[Delivery]:
        """Resend every expired in-flight message with dup=1 or drop it at the cap."""
        out = []
        for s in list(self.sessions.values()):
            for pid, entry in sorted(s.inflight.items()):
                if entry.deadline > now:
                    continue
                if self.retry_cap is not None and entry.retries >= self.retry_cap:
                    del s.inflight[pid]
                    self.counters["retry_exhausted"] += 1
                    continue
                entry.retries += 1
                entry.deadline = now + self.retry_timeout_ns
                entry.packet = entry.packet.with_(dup=True)
                self.counters["retransmitted"] += 1
                if self._safe_send(s, entry.packet):
                    out.append(Delivery(s.client_id, entry.packet))
                self._arm(entry.deadline)
        return out
