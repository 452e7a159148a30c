"""MQTT 3.1.1 wire subset: CONNECT, CONNACK, PUBLISH, PUBACK, SUBSCRIBE,
SUBACK, PINGREQ, PINGRESP and DISCONNECT; QoS 0 and 1 only; no retain."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

MAX_REMAINING = 268_435_455


class MalformedPacket(ValueError):
    pass


class PacketType(enum.IntEnum):
    CONNECT = 1
    CONNACK = 2
    PUBLISH = 3
    PUBACK = 4
    SUBSCRIBE = 8
    SUBACK = 9
    PINGREQ = 12
    PINGRESP = 13
    DISCONNECT = 14


# fixed low-nibble flags for every type except PUBLISH
_FIXED_FLAGS = {t: 0 for t in PacketType}
_FIXED_FLAGS[PacketType.SUBSCRIBE] = 0b0010


@dataclass(frozen=True)
class MqttPacket:
    packet_type: PacketType
    dup: bool = False
    qos: int = 0
    retain: bool = False
    packet_id: int | None = None
    topic: str = ""
    payload: bytes = b""
    # CONNECT: client id; SUBSCRIBE: [(filter, qos)]; SUBACK: return codes
    client_id: str = ""
    filters: tuple = field(default_factory=tuple)
    return_codes: tuple = field(default_factory=tuple)
    keepalive: int = 60

    def __post_init__(self):
        object.__setattr__(self, "packet_type", PacketType(self.packet_type))
        object.__setattr__(self, "payload", bytes(self.payload))
        object.__setattr__(self, "filters", tuple(tuple(f) for f in self.filters))
        object.__setattr__(self, "return_codes", tuple(self.return_codes))

    def validate(self) -> None:
        t = self.packet_type
        if self.retain:
            raise MalformedPacket("retain is not supported")
        if t == PacketType.PUBLISH:
            if self.qos not in (0, 1):
                raise MalformedPacket(f"qos {self.qos} not in {{0, 1}}")
            if self.qos == 1 and not self.packet_id:
                raise MalformedPacket("QoS1 PUBLISH needs a nonzero packet id")
            if self.qos == 0 and self.packet_id is not None:
                raise MalformedPacket("QoS0 PUBLISH carries no packet id")
            if self.qos == 0 and self.dup:
                raise MalformedPacket("dup set on a QoS0 PUBLISH")
        elif t in (PacketType.PUBACK, PacketType.SUBSCRIBE, PacketType.SUBACK):
            if not self.packet_id:
                raise MalformedPacket(f"{t.name} needs a nonzero packet id")
        if self.packet_id is not None and not 0 <= self.packet_id <= 0xFFFF:
            raise MalformedPacket("packet id exceeds 16 bits")

    def with_(self, **changes) -> "MqttPacket":
        d = dict(self.__dict__)
        d.update(changes)
        return MqttPacket(**d)


def encode_remaining_length(n: int) -> bytes:
    if not 0 <= n <= MAX_REMAINING:
        raise ValueError(f"remaining length {n} out of range")
    out = bytearray()
    while True:
        digit = n % 128
        n //= 128
        if n:
            digit |= 0x80
        out.append(digit)
        if not n:
            return bytes(out)


def decode_remaining_length(data, pos: int = 1) -> tuple[int, int]:
    """Return (value, bytes consumed); raises IndexError if data runs out."""
    value = 0
    mult = 1
    for i in range(4):
        b = data[pos + i]
        value += (b & 0x7F) * mult
        if not b & 0x80:
            return value, i + 1
        mult *= 128
    raise MalformedPacket("remaining length longer than 4 bytes")


def _str(s: str) -> bytes:
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise MalformedPacket("string longer than 65535 bytes")
    return struct.pack(">H", len(b)) + b


def encode_packet(p: MqttPacket) -> bytes:
    p.validate()
    t = p.packet_type
    if t == PacketType.PUBLISH:
        flags = (0x08 if p.dup else 0) | (p.qos << 1)
        body = _str(p.topic)
        if p.qos:
            body += struct.pack(">H", p.packet_id)
        body += p.payload
    else:
        flags = _FIXED_FLAGS[t]
        if t == PacketType.CONNECT:
            body = _str("MQTT") + bytes([4, 0x02]) + struct.pack(">H", p.keepalive) + _str(p.client_id)
        elif t == PacketType.CONNACK:
            code = p.return_codes[0] if p.return_codes else 0
            body = bytes([0, code])
        elif t == PacketType.PUBACK:
            body = struct.pack(">H", p.packet_id)
        elif t == PacketType.SUBSCRIBE:
            body = struct.pack(">H", p.packet_id)
            for filt, qos in p.filters:
                body += _str(filt) + bytes([qos])
        elif t == PacketType.SUBACK:
            body = struct.pack(">H", p.packet_id) + bytes(p.return_codes)
        else:
            body = b""
    return bytes([(int(t) << 4) | flags]) + encode_remaining_length(len(body)) + body


def _read_str(body: bytes, pos: int) -> tuple[str, int]:
    if pos + 2 > len(body):
        raise MalformedPacket("truncated string length")
    (n,) = struct.unpack_from(">H", body, pos)
    pos += 2
    if pos + n > len(body):
        raise MalformedPacket("truncated string")
    try:
        return body[pos:pos + n].decode("utf-8"), pos + n
    except UnicodeDecodeError:
        raise MalformedPacket("invalid UTF-8") from None


def _read_u16(body: bytes, pos: int) -> int:
    if pos + 2 > len(body):
        raise MalformedPacket("truncated packet id")
    return struct.unpack_from(">H", body, pos)[0]


def _decode_body(first: int, body: bytes) -> MqttPacket:
    try:
        t = PacketType(first >> 4)
    except ValueError:
        raise MalformedPacket(f"unsupported packet type {first >> 4}") from None
    flags = first & 0x0F
    if t == PacketType.PUBLISH:
        qos = (flags >> 1) & 0x03
        if qos not in (0, 1):
            raise MalformedPacket(f"qos {qos} not in {{0, 1}}")
        if flags & 0x01:
            raise MalformedPacket("retain flag set")
        dup = bool(flags & 0x08)
        topic, pos = _read_str(body, 0)
        pid = None
        if qos:
            pid = _read_u16(body, pos)
            pos += 2
        p = MqttPacket(t, dup=dup, qos=qos, packet_id=pid, topic=topic, payload=body[pos:])
    else:
        if flags != _FIXED_FLAGS[t]:
            raise MalformedPacket(f"reserved flag bits set on {t.name}")
        if t == PacketType.CONNECT:
            proto, pos = _read_str(body, 0)
            if proto != "MQTT" or len(body) < pos + 4:
                raise MalformedPacket("bad CONNECT variable header")
            (keepalive,) = struct.unpack_from(">H", body, pos + 2)
            client_id, pos = _read_str(body, pos + 4)
            p = MqttPacket(t, client_id=client_id, keepalive=keepalive)
        elif t == PacketType.CONNACK:
            if len(body) != 2:
                raise MalformedPacket("CONNACK must be 2 bytes")
            p = MqttPacket(t, return_codes=(body[1],))
        elif t == PacketType.PUBACK:
            if len(body) != 2:
                raise MalformedPacket("PUBACK must be 2 bytes")
            p = MqttPacket(t, packet_id=_read_u16(body, 0))
        elif t == PacketType.SUBSCRIBE:
            pid = _read_u16(body, 0)
            pos = 2
            filters = []
            while pos < len(body):
                filt, pos = _read_str(body, pos)
                if pos >= len(body):
                    raise MalformedPacket("missing requested qos")
                filters.append((filt, body[pos]))
                pos += 1
            p = MqttPacket(t, packet_id=pid, filters=filters)
        elif t == PacketType.SUBACK:
            p = MqttPacket(t, packet_id=_read_u16(body, 0), return_codes=tuple(body[2:]))
        else:
            if body:
                raise MalformedPacket(f"{t.name} has no body")
            p = MqttPacket(t)
    p.validate()
    return p


def decode_packet(data: bytes) -> MqttPacket:
    """Decode exactly one packet from ``data``."""
    data = bytes(data)
    if not data:
        raise MalformedPacket("empty packet")
    try:
        n, used = decode_remaining_length(data, 1)
    except IndexError:
        raise MalformedPacket("truncated remaining length") from None
    start = 1 + used
    if len(data) != start + n:
        raise MalformedPacket(f"remaining length {n} does not match {len(data) - start} bytes")
    return _decode_body(data[0], data[start:])


class PacketReader:
    """Incremental decoder for a byte stream carrying back-to-back packets."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[MqttPacket]:
        self._buf += data
        out = []
        while len(self._buf) >= 2:
            try:
                n, used = decode_remaining_length(self._buf, 1)
            except IndexError:
                break
            end = 1 + used + n
            if len(self._buf) < end:
                break
            out.append(_decode_body(self._buf[0], bytes(self._buf[1 + used:end])))
            del self._buf[:end]
        return out


def topic_matches(filt: str, topic: str) -> bool:
    """Exact match, or '#' as the final filter level matching any suffix."""
    if filt == topic:
        return True
    f_levels = filt.split("/")
    if f_levels[-1] != "#":
        return False
    prefix = f_levels[:-1]
    t_levels = topic.split("/")
    return len(t_levels) >= len(prefix) and t_levels[:len(prefix)] == prefix
