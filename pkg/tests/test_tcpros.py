import hashlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _world import profile
from e5sh.netem import EventScheduler, LinkPair
from e5sh.tcpros import (MAX_MESSAGE, FrameReader, FramingError, HandshakeError, HeaderError,
                         MalformedFieldError, TcprosPublisher, TcprosSubscriber,
                         TruncationError, decode_header, encode_fields, encode_header,
                         frame_message, md5sum_for)
from e5sh.transport import SimConnection


def _hdr(topic="/camera/rgb", t="Frame"):
    return {"callerid": "/n", "topic": topic, "type": t, "md5sum": md5sum_for(t)}


def test_single_field_golden():
    assert encode_fields({"topic": "/camera/rgb"}) == \
        b"\x15\x00\x00\x00" + b"\x11\x00\x00\x00" + b"topic=/camera/rgb"


def test_required_keys_come_first():
    h = {"extra": "1", **_hdr()}
    data = encode_header(h)
    first = data[8:8 + len("callerid")]
    assert first == b"callerid"
    assert decode_header(data) == h


def test_md5sum_is_md5_of_type_name():
    assert md5sum_for("Frame") == hashlib.md5(b"Frame").hexdigest()


def test_missing_md5sum():
    h = _hdr()
    del h["md5sum"]
    with pytest.raises(HeaderError):
        encode_header(h)


def test_malformed_field():
    body = b"\x0d\x00\x00\x00topicNoEquals"
    with pytest.raises(MalformedFieldError):
        decode_header(len(body).to_bytes(4, "little") + body)


def test_declared_length_shorter_than_fields():
    good = encode_header(_hdr())
    bad = (len(good) - 10).to_bytes(4, "little") + good[4:]
    with pytest.raises(TruncationError):
        decode_header(bad)


@settings(max_examples=80)
@given(st.dictionaries(st.text("abcdefgh_", min_size=1, max_size=8),
                       st.text(st.characters(min_codepoint=32, max_codepoint=126), max_size=20),
                       max_size=5))
def test_header_roundtrip(extra):
    h = {**_hdr(), **extra}
    assert decode_header(encode_header(h)) == h


def test_message_framing():
    assert frame_message(b"abc") == b"\x03\x00\x00\x00abc"


def test_oversize_message():
    class Big(bytes):
        def __len__(self):
            return MAX_MESSAGE + 1
    with pytest.raises(FramingError):
        frame_message(Big())
    r = FrameReader()
    with pytest.raises(FramingError):
        r.feed((MAX_MESSAGE + 1).to_bytes(4, "little"))


@settings(max_examples=80)
@given(st.lists(st.binary(max_size=50), max_size=8), st.integers(1, 9))
def test_frame_reader_any_chunking(msgs, chunk):
    wire = b"".join(frame_message(m) for m in msgs)
    r = FrameReader()
    out = []
    for i in range(0, len(wire), chunk):
        out.extend(r.feed(wire[i:i + chunk]))
    assert out == msgs


def _topic(pub_type="Frame", sub_type="Frame", seed=0, delay_ms=1.0, loss=0.0):
    sched = EventScheduler()
    lp = LinkPair(profile(delay_ms, loss, seed), sched, reliable=True)
    sub_end, pub_end = SimConnection.pair(lp.up, lp.down, ("sub", "pub"))
    pub = TcprosPublisher("/camera/rgb", pub_type, "/camera")
    got = []
    errors = []
    sub = TcprosSubscriber("/camera/rgb", sub_type, got.append, "/edge", on_error=errors.append)
    pub.accept(pub_end)
    sub.connect(sub_end)
    sched.run()
    return sched, pub, sub, got, errors


def test_handshake_connects():
    _, pub, sub, _, errors = _topic()
    assert sub.connected and not errors
    assert len(pub.endpoints) == 1
    assert pub.endpoints[0].peer == "/edge"
    assert sub.endpoint.peer == "/camera"


def test_type_mismatch_rejected():
    _, pub, sub, _, errors = _topic("Frame", "Mask")
    assert not sub.connected
    assert isinstance(errors[0], HandshakeError)
    assert pub.endpoints == [] and pub.rejected


def test_zero_subscribers():
    pub = TcprosPublisher("/t", "Frame")
    assert pub.publish(b"x") == 0


def test_fifo_two_messages():
    sched, pub, _, got, _ = _topic()
    pub.publish(b"p1")
    pub.publish(b"p2")
    sched.run()
    assert got == [b"p1", b"p2"]


@pytest.mark.parametrize("loss", [0.0, 0.2])
def test_thousand_messages_in_order(loss):
    sched, pub, sub, got, _ = _topic(seed=7, loss=0.0)
    # the handshake ran loss-free; degrade the data path afterwards
    for link in (sub._conn.out_link, sub._conn.peer.out_link):
        link.profile = link.profile.with_(loss=loss)
    msgs = [i.to_bytes(4, "little") * 3 for i in range(1000)]
    for i, m in enumerate(msgs):
        sched.call_at(sched.now + i * 100_000, pub.publish, m)
    sched.run()
    assert got == msgs
    assert sub.overflow == 0


def test_subscriber_sends_nothing_after_handshake():
    sched, pub, sub, _, _ = _topic()
    n = sub._conn.out_link.sent
    for _ in range(5):
        pub.publish(b"x")
    sched.run()
    assert sub._conn.out_link.sent == n


def test_connection_reset_surfaces_delivery_error():
    from e5sh.tcpros import DeliveryError
    sched, pub, sub, _, _ = _topic()
    sub._conn.peer.closed = True  # publisher side reset without notification
    with pytest.raises(DeliveryError):
        pub.publish(b"x")
    assert pub.endpoints == []


def test_remote_close_removes_subscriber():
    sched, pub, sub, _, _ = _topic()
    sub._conn.close()
    sched.run()
    assert pub.publish(b"x") == 0
