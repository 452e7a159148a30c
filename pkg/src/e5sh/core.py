"""Shared domain types and the frame/mask envelope codec.

Envelope layout (all integers little-endian)::

    'E5SH' | version u8 | channel u8 | encoding u8 | frame_id u64 |
    capture_ts u64 | width u16 | height u16 | payload_len u32 | payload

Channels are 1=RGB, 2=Depth, 3=Mask; encodings 0=Raw, 1=RLE. RLE runs are
``[run u16][pixel bytes]`` and never cross a row boundary.
"""

from __future__ import annotations

import enum
import struct
import time
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from e5sh import kernels

MAGIC = b"E5SH"
VERSION = 0x01
HEADER = struct.Struct("<4sBBBQQHHI")
HEADER_SIZE = HEADER.size  # 31
MAX_PAYLOAD = 2**32 - 1


class CodecError(ValueError):
    """Base class for envelope codec failures."""


class EncodingError(CodecError):
    pass


class FormatError(CodecError):
    pass


class TruncationError(CodecError):
    pass


class UnsupportedError(CodecError):
    pass


class ClassId(enum.IntEnum):
    STRAWBERRY = 0
    CANOPY = 1
    RIGID_OBSTACLE = 2
    BACKGROUND = 3


class Channel(enum.IntEnum):
    RGB = 1
    DEPTH = 2
    MASK = 3


class Encoding(enum.IntEnum):
    RAW = 0
    RLE = 1


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @classmethod
    def default(cls, width: int = 848, height: int = 480) -> "CameraIntrinsics":
        # D4xx-like field of view, scaled with the image width
        f = 610.0 * width / 848.0
        return cls(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0, width=width, height=height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    if a.flags.writeable:
        a = a.copy()
        a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Frame:
    """One RGB-D sample. ``depth`` is in millimetres, 0 meaning no return."""

    frame_id: int
    capture_ts: int
    rgb: np.ndarray
    depth: np.ndarray
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        rgb = np.asarray(self.rgb, dtype=np.uint8)
        depth = np.asarray(self.depth, dtype=np.uint16)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ValueError("rgb must be (height, width, 3)")
        if depth.shape != rgb.shape[:2]:
            raise ValueError("rgb and depth sizes differ")
        object.__setattr__(self, "rgb", _frozen(rgb))
        object.__setattr__(self, "depth", _frozen(depth))

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return (self.frame_id == other.frame_id and self.capture_ts == other.capture_ts
                and self.intrinsics == other.intrinsics
                and np.array_equal(self.rgb, other.rgb)
                and np.array_equal(self.depth, other.depth))


@dataclass(frozen=True, eq=False)
class LabeledMask:
    """Per-pixel class ids plus 8-bit quantized confidence (255 == 1.0)."""

    classes: np.ndarray
    confidence: np.ndarray = None

    def __post_init__(self):
        classes = np.asarray(self.classes, dtype=np.uint8)
        if classes.ndim != 2:
            raise ValueError("class map must be 2-D")
        if classes.size and classes.max() > 3:
            raise ValueError("class id out of range")
        conf = self.confidence
        if conf is None:
            conf = np.full(classes.shape, 255, dtype=np.uint8)
        conf = np.asarray(conf)
        if conf.dtype.kind == "f":
            conf = quantize_confidence(conf)
        conf = conf.astype(np.uint8, copy=False)
        if conf.shape != classes.shape:
            raise ValueError("confidence shape differs from class map")
        object.__setattr__(self, "classes", _frozen(classes))
        object.__setattr__(self, "confidence", _frozen(conf))

    @property
    def width(self) -> int:
        return self.classes.shape[1]

    @property
    def height(self) -> int:
        return self.classes.shape[0]

    def confidence_float(self) -> np.ndarray:
        return self.confidence.astype(np.float64) / 255.0

    def __eq__(self, other):
        if not isinstance(other, LabeledMask):
            return NotImplemented
        return (np.array_equal(self.classes, other.classes)
                and np.array_equal(self.confidence, other.confidence))


def quantize_confidence(conf) -> np.ndarray:
    c = np.clip(np.asarray(conf, dtype=np.float64), 0.0, 1.0)
    return np.rint(c * 255.0).astype(np.uint8)


class Clock:
    """Nanosecond clock, either wall (monotonic) or virtual.

    A virtual clock is only moved by the event scheduler via ``_set``.
    """

    WALL = "wall"
    VIRTUAL = "virtual"

    def __init__(self, mode: str = VIRTUAL, start: int = 0):
        if mode not in (self.WALL, self.VIRTUAL):
            raise ValueError(f"unknown clock mode {mode!r}")
        self.mode = mode
        self._now = int(start)

    def now(self) -> int:
        if self.mode == self.WALL:
            return time.monotonic_ns()
        return self._now

    def _set(self, t: int) -> None:
        if self.mode != self.VIRTUAL:
            raise RuntimeError("wall clock cannot be set")
        if t < self._now:
            raise ValueError("virtual clock cannot move backward")
        self._now = int(t)


class Envelope(NamedTuple):
    version: int
    channel: Channel
    encoding: Encoding
    frame_id: int
    capture_ts: int
    width: int
    height: int
    payload: bytes

    def pixels(self) -> np.ndarray:
        """Decode the payload into its array form (see ``_unpack_pixels``)."""
        return _unpack_pixels(self)


_BYTES_PER_PIXEL = {Channel.RGB: 3, Channel.DEPTH: 2, Channel.MASK: 2}


def _envelope(channel, encoding, frame_id, capture_ts, width, height, payload) -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise EncodingError("payload exceeds 2**32-1 bytes")
    if not (0 <= width <= 0xFFFF and 0 <= height <= 0xFFFF):
        raise EncodingError("image dimensions exceed 16 bits")
    head = HEADER.pack(MAGIC, VERSION, int(channel), int(encoding),
                       int(frame_id), int(capture_ts), width, height, len(payload))
    return head + payload


def _pack_pixels(units: np.ndarray, encoding: Encoding) -> bytes:
    # units: (height, width, bytes-per-pixel) uint8
    encoding = Encoding(encoding)
    if encoding == Encoding.RAW:
        return units.tobytes()
    return kernels.rle_encode(np.ascontiguousarray(units, dtype=np.uint8))


def encode_frame(frame: Frame, channel: Channel, encoding: Encoding = Encoding.RAW) -> bytes:
    """Serialize one channel of ``frame`` into an envelope."""
    channel = Channel(channel)
    if channel == Channel.RGB:
        units = frame.rgb
    elif channel == Channel.DEPTH:
        units = frame.depth.astype("<u2").view(np.uint8).reshape(frame.height, frame.width, 2)
    else:
        raise EncodingError("frames carry RGB or Depth channels only")
    payload = _pack_pixels(units, encoding)
    return _envelope(channel, encoding, frame.frame_id, frame.capture_ts,
                     frame.width, frame.height, payload)


def encode_mask(mask: LabeledMask, encoding: Encoding = Encoding.RLE,
                frame_id: int = 0, capture_ts: int = 0) -> bytes:
    units = np.stack([mask.classes, mask.confidence], axis=-1)
    payload = _pack_pixels(units, encoding)
    return _envelope(Channel.MASK, encoding, frame_id, capture_ts,
                     mask.width, mask.height, payload)


def envelope_length(data: bytes) -> int:
    """Total byte length of the envelope at the start of ``data``."""
    if len(data) < HEADER_SIZE:
        raise TruncationError("short envelope header")
    return HEADER_SIZE + struct.unpack_from("<I", data, HEADER_SIZE - 4)[0]


def decode_frame(data: bytes) -> Envelope:
    """Parse and validate an envelope; the payload is returned undecoded."""
    data = bytes(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("bad magic")
    if len(data) < HEADER_SIZE:
        raise TruncationError("short envelope header")
    magic, version, ch, enc, frame_id, ts, width, height, n = HEADER.unpack_from(data)
    if version != VERSION:
        raise UnsupportedError(f"unsupported version {version}")
    try:
        channel = Channel(ch)
        encoding = Encoding(enc)
    except ValueError:
        raise UnsupportedError(f"unknown channel/encoding byte ({ch}, {enc})") from None
    payload = data[HEADER_SIZE:]
    if len(payload) < n:
        raise TruncationError(f"payload has {len(payload)} of {n} bytes")
    if len(payload) > n:
        raise FormatError("trailing bytes after payload")
    env = Envelope(version, channel, encoding, frame_id, ts, width, height, payload)
    if encoding == Encoding.RAW:
        expected = width * height * _BYTES_PER_PIXEL[channel]
        if n != expected:
            raise FormatError(f"raw payload length {n} != {expected}")
    return env


def _unpack_pixels(env: Envelope) -> np.ndarray:
    k = _BYTES_PER_PIXEL[env.channel]
    if env.encoding == Encoding.RAW:
        units = np.frombuffer(env.payload, dtype=np.uint8).reshape(env.height, env.width, k)
    else:
        try:
            units = kernels.rle_decode(env.payload, env.height, env.width, k)
        except ValueError as exc:
            raise FormatError(str(exc)) from None
    if env.channel == Channel.DEPTH:
        return np.ascontiguousarray(units).view("<u2").reshape(env.height, env.width).astype(np.uint16)
    return units


def decode_mask(data: bytes) -> LabeledMask:
    env = decode_frame(data)
    if env.channel != Channel.MASK:
        raise FormatError("not a mask envelope")
    units = env.pixels()
    classes = units[..., 0]
    if classes.size and classes.max() > 3:
        raise FormatError("class byte > 3")
    return LabeledMask(classes.copy(), units[..., 1].copy())


def frame_from_envelopes(rgb_data: bytes, depth_data: bytes,
                         intrinsics: CameraIntrinsics) -> Frame:
    rgb_env = decode_frame(rgb_data)
    depth_env = decode_frame(depth_data)
    if rgb_env.channel != Channel.RGB or depth_env.channel != Channel.DEPTH:
        raise FormatError("expected an RGB and a Depth envelope")
    if rgb_env.frame_id != depth_env.frame_id:
        raise FormatError("rgb/depth frame ids differ")
    return Frame(rgb_env.frame_id, rgb_env.capture_ts, rgb_env.pixels(),
                 depth_env.pixels(), intrinsics)
