import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _world import MqttWorld
from e5sh.mqtt import (MalformedPacket, MqttPacket, PacketReader, PacketType, decode_packet,
                       decode_remaining_length, encode_packet, encode_remaining_length,
                       topic_matches)


@pytest.mark.parametrize("n,want", [(0, b"\x00"), (127, b"\x7f"), (128, b"\x80\x01"),
                                    (321, b"\xc1\x02"), (268_435_455, b"\xff\xff\xff\x7f")])
def test_remaining_length_vectors(n, want):
    assert encode_remaining_length(n) == want
    assert decode_remaining_length(b"\x30" + want) == (n, len(want))


@given(st.integers(0, 268_435_455))
def test_remaining_length_roundtrip(n):
    enc = encode_remaining_length(n)
    assert 1 <= len(enc) <= 4
    assert decode_remaining_length(b"\x00" + enc)[0] == n


def test_remaining_length_limits():
    with pytest.raises((MalformedPacket, ValueError)):
        encode_remaining_length(268_435_456)
    with pytest.raises(MalformedPacket):
        decode_remaining_length(b"\x30\xff\xff\xff\xff\x01")


def test_qos0_publish_golden():
    data = encode_packet(MqttPacket(PacketType.PUBLISH, topic="t", payload=b"x"))
    # 2 bytes topic length + 1 byte topic + 1 byte payload
    assert data == b"\x30\x04\x00\x01tx"
    assert decode_packet(data) == MqttPacket(PacketType.PUBLISH, topic="t", payload=b"x")


def test_qos1_publish_layout():
    data = encode_packet(MqttPacket(PacketType.PUBLISH, qos=1, packet_id=258, dup=True,
                                    topic="ab", payload=b"z"))
    assert data == b"\x3a\x07\x00\x02ab\x01\x02z"


def test_qos3_rejected():
    with pytest.raises(MalformedPacket):
        decode_packet(b"\x36\x04\x00\x01tx")
    with pytest.raises(MalformedPacket):
        encode_packet(MqttPacket(PacketType.PUBLISH, qos=3, packet_id=1, topic="t"))


def test_qos1_needs_packet_id():
    with pytest.raises(MalformedPacket):
        encode_packet(MqttPacket(PacketType.PUBLISH, qos=1, topic="t"))


def test_reserved_flags_rejected():
    # PUBACK must carry flags 0
    with pytest.raises(MalformedPacket):
        decode_packet(b"\x41\x02\x00\x01")


packets = st.one_of(
    st.builds(lambda t, p: MqttPacket(PacketType.PUBLISH, topic=t, payload=p),
              st.text("abc/#", min_size=1, max_size=8), st.binary(max_size=300)),
    st.builds(lambda t, p, i, d: MqttPacket(PacketType.PUBLISH, qos=1, packet_id=i, dup=d,
                                            topic=t, payload=p),
              st.text("xyz/", min_size=1, max_size=8), st.binary(max_size=300),
              st.integers(1, 0xFFFF), st.booleans()),
    st.builds(lambda i: MqttPacket(PacketType.PUBACK, packet_id=i), st.integers(1, 0xFFFF)),
    st.builds(lambda i, f: MqttPacket(PacketType.SUBSCRIBE, packet_id=i, filters=[(f, 1)]),
              st.integers(1, 0xFFFF), st.text("ab/#", min_size=1, max_size=6)),
    st.builds(lambda c: MqttPacket(PacketType.CONNECT, client_id=c), st.text("rbt0", max_size=6)),
)


@settings(max_examples=150, deadline=None)
@given(st.lists(packets, min_size=1, max_size=6), st.integers(1, 17))
def test_stream_reassembly(ps, chunk):
    wire = b"".join(encode_packet(p) for p in ps)
    reader = PacketReader()
    out = []
    for i in range(0, len(wire), chunk):
        out.extend(reader.feed(wire[i:i + chunk]))
    assert out == ps


@pytest.mark.parametrize("filt,topic,want", [
    ("robot/1/rgb", "robot/1/rgb", True),
    ("robot/#", "robot/1/rgb", True),
    ("robot/1/#", "robot/1/rgb", True),
    ("#", "anything/at/all", True),
    ("robot/2/#", "robot/1/rgb", False),
    ("robot/1/depth", "robot/1/rgb", False),
])
def test_topic_matching(filt, topic, want):
    assert topic_matches(filt, topic) is want


def test_wildcard_routing_and_no_match_drop():
    w = MqttWorld()
    w.add("sub", "robot/#")
    pub = w.add("pub")
    pub.publish("robot/1/rgb", b"a", 1)
    pub.publish("camera/rgb", b"b", 1)
    w.run()
    assert [p.payload for p in w.inbox["sub"]] == [b"a"]
    assert w.broker.counters["dropped_no_match"] == 1


def test_inflight_empties_after_ack():
    w = MqttWorld()
    w.add("sub", "t")
    pub = w.add("pub")
    for i in range(20):
        pub.publish("t", bytes([i]), 1)
    w.run()
    assert w.broker.inflight_count == 0
    assert not pub.pending
    assert len(w.inbox["sub"]) == 20
    assert not any(p.dup for p in w.inbox["sub"])


def test_delivery_qos_is_min_of_publish_and_subscription():
    w = MqttWorld()
    w.add("sub", "t", qos=0)
    pub = w.add("pub")
    pub.publish("t", b"x", 1)
    w.run()
    assert [p.qos for p in w.inbox["sub"]] == [0]


def test_lost_ack_gives_dup_redelivery():
    w = MqttWorld()
    w.add("sub", "t")
    pub = w.add("pub")
    w.set_loss("sub", up=1.0)  # subscriber PUBACKs never arrive
    pub.publish("t", b"m", 1)
    w.sched.run(until=w.sched.now + 250 * 10**6)
    got = w.inbox["sub"]
    assert len(got) == 2
    assert (got[0].dup, got[1].dup) == (False, True)


def test_retry_cap_drops_message():
    w = MqttWorld(retry_cap=5)
    w.add("sub", "t")
    pub = w.add("pub")
    w.set_loss("sub", down=1.0)
    pub.publish("t", b"m", 1)
    w.run()
    assert w.inbox["sub"] == []
    assert w.broker.counters["retransmitted"] == 5
    assert w.broker.counters["retry_exhausted"] == 1
    assert w.broker.inflight_count == 0


def test_lossless_qos1_exactly_once():
    w = MqttWorld()
    w.add("sub", "t")
    pub = w.add("pub")
    for i in range(1000):
        pub.publish("t", i.to_bytes(2, "little"), 1)
    w.run()
    got = w.inbox["sub"]
    assert len(got) == 1000 and not any(p.dup for p in got)


def qos1_under_loss(n=1000, loss=0.2, seed=3):
    """Publish ``n`` QoS1 messages with ``loss`` on all four directions."""
    w = MqttWorld(seed=seed)
    w.add("sub", "t")
    pub = w.add("pub")
    w.set_loss("sub", up=loss, down=loss)
    w.set_loss("pub", up=loss, down=loss)
    for i in range(n):
        w.sched.call_at(w.sched.now + i * 10**6, pub.publish, "t", i.to_bytes(2, "little"), 1)
    w.run()
    return w


def qos0_under_loss(n=1000, loss=0.2, seed=3):
    w = MqttWorld(seed=seed)
    w.add("sub", "t", qos=0)
    pub = w.add("pub")
    w.set_loss("pub", up=loss)
    for i in range(n):
        pub.publish("t", i.to_bytes(2, "little"), 0)
    w.run()
    return w


def test_qos1_at_least_once_under_loss():
    w = qos1_under_loss()
    seen = {}
    for p in w.inbox["sub"]:
        if p.payload in seen:
            assert p.dup, "redelivery without the dup flag"
        seen[p.payload] = seen.get(p.payload, 0) + 1
    assert len(seen) == 1000
    assert w.broker.counters["retry_exhausted"] == 0


def test_qos0_at_most_once_binomial():
    n, p = 1000, 0.8
    w = qos0_under_loss(n)
    got = len(w.inbox["sub"])
    assert got <= n
    assert len({m.payload for m in w.inbox["sub"]}) == got
    sigma = math.sqrt(n * p * (1 - p))
    assert abs(got - n * p) <= 3 * sigma
