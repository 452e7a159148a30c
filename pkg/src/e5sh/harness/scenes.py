"""Synthetic RGB-D scenes with exact four-class ground truth.

Shapes are painted nearest-first (strawberries, canopy, rigid obstacles);
each later layer only claims pixels still free, so the visible area of a
layer is controlled directly. The last shape of each layer is scaled by
bisection so the layer lands on its per-scene abundance target.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from e5sh.core import (CameraIntrinsics, Channel, ClassId, Encoding, Frame, LabeledMask,
                       decode_frame, decode_mask, encode_frame, encode_mask)

logger = logging.getLogger(__name__)

TABLE1_ABUNDANCE = {ClassId.RIGID_OBSTACLE: 0.359, ClassId.CANOPY: 0.333,
                    ClassId.STRAWBERRY: 0.022, ClassId.BACKGROUND: 0.287}
FRAME_PERIOD_NS = 33_333_333

RIPE = (200, 30, 40)
UNRIPE = (195, 205, 130)
LEAF = (40, 140, 50)
RIGID = (120, 120, 130)
BACKGROUND = (230, 230, 220)


class UnsatisfiableSpec(RuntimeError):
    pass


@dataclass
class SceneSpec:
    width: int = 848
    height: int = 480
    berries: tuple[int, int] = (1, 4)
    canopy_blobs: tuple[int, int] = (2, 5)
    rigid_rects: tuple[int, int] = (2, 6)
    # metres: (near, far) per layer
    berry_depth: tuple[float, float] = (0.25, 0.45)
    canopy_depth: tuple[float, float] = (0.40, 0.75)
    rigid_depth: tuple[float, float] = (0.60, 1.10)
    background_depth: tuple[float, float] = (1.20, 2.50)
    target: dict = field(default_factory=lambda: dict(TABLE1_ABUNDANCE))
    jitter: float = 0.03            # per-scene target jitter, fraction of image
    berry_jitter: float = 0.005
    tolerance: float = 0.015        # dataset mean, fraction
    berry_tolerance: float = 0.010
    unripe_fraction: float = 0.3
    noise_sigma: float = 8.0
    invalid_depth_fraction: float = 0.005


def _ellipse(h, w, cy, cx, ry, rx, theta=0.0):
    y0, y1 = max(0, int(cy - max(ry, rx)) - 1), min(h, int(cy + max(ry, rx)) + 2)
    x0, x1 = max(0, int(cx - max(ry, rx)) - 1), min(w, int(cx + max(ry, rx)) + 2)
    m = np.zeros((h, w), dtype=bool)
    if y1 <= y0 or x1 <= x0 or rx <= 0 or ry <= 0:
        return m
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    m[y0:y1, x0:x1] = u * u + v * v <= 1.0
    return m


def _rect(h, w, cy, cx, hh, hw):
    m = np.zeros((h, w), dtype=bool)
    y0, y1 = max(0, int(round(cy - hh))), min(h, int(round(cy + hh)))
    x0, x1 = max(0, int(round(cx - hw))), min(w, int(round(cx + hw)))
    if y1 > y0 and x1 > x0:
        m[y0:y1, x0:x1] = True
    return m


def _fit_scale(shape_fn, free, need, lo=0.0, hi=1.0, iters=30):
    """Largest scale in [lo, hi] whose new visible area does not exceed ``need``."""
    best = np.zeros_like(free)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        m = shape_fn(mid) & free
        if m.sum() <= need:
            best, lo = m, mid
        else:
            hi = mid
    return best


def _scene(spec: SceneSpec, rng: np.random.Generator):
    h, w = spec.height, spec.width
    n = h * w
    claimed = np.zeros((h, w), dtype=bool)
    classes = np.full((h, w), ClassId.BACKGROUND, dtype=np.uint8)
    depth_m = np.zeros((h, w))
    colors = np.zeros((h, w, 3))
    targets = {}
    for c in (ClassId.STRAWBERRY, ClassId.CANOPY, ClassId.RIGID_OBSTACLE):
        jit = spec.berry_jitter if c == ClassId.STRAWBERRY else spec.jitter
        targets[c] = max(0.0, spec.target[c] + rng.uniform(-jit, jit))
    diag = float(np.hypot(h, w))

    def paint(mask, cls, color, d_near, d_far):
        d = rng.uniform(d_near, d_far)
        slope = rng.normal(0.0, 0.05, size=2) / diag
        yy, xx = np.nonzero(mask)
        depth_m[yy, xx] = d + slope[0] * (yy - h / 2) + slope[1] * (xx - w / 2)
        classes[mask] = cls
        jitter = rng.uniform(-15, 15, size=3)
        colors[mask] = np.asarray(color, dtype=np.float64) + jitter
        claimed[mask] = True

    # strawberries: k ellipses scaled together to hit the target area
    k = int(rng.integers(spec.berries[0], spec.berries[1] + 1))
    need = int(round(targets[ClassId.STRAWBERRY] * n))
    params = [(rng.uniform(0.1, 0.9) * h, rng.uniform(0.1, 0.9) * w, rng.uniform(0.7, 1.3),
               rng.uniform(0, np.pi)) for _ in range(k)]
    r_max = 0.5 * min(h, w)

    def berries(scale):
        m = np.zeros((h, w), dtype=bool)
        for cy, cx, aspect, th in params:
            m |= _ellipse(h, w, cy, cx, scale * r_max * aspect, scale * r_max / aspect, th)
        return m

    union = _fit_scale(berries, ~claimed, need)
    # colour per berry: assign each pixel to its nearest berry centre
    if union.any():
        yy, xx = np.nonzero(union)
        centres = np.array([(p[0], p[1]) for p in params])
        owner = np.argmin((yy[:, None] - centres[:, 0]) ** 2 + (xx[:, None] - centres[:, 1]) ** 2, axis=1)
        for i in range(k):
            sel = np.zeros((h, w), dtype=bool)
            sel[yy[owner == i], xx[owner == i]] = True
            color = UNRIPE if rng.random() < spec.unripe_fraction else RIPE
            paint(sel, ClassId.STRAWBERRY, color, *spec.berry_depth)

    def grow(cls, count_range, make, color, depth_range):
        need = int(round(targets[cls] * n))
        have = 0
        count = int(rng.integers(count_range[0], count_range[1] + 1))
        for i in range(count * 4):
            if have >= need:
                break
            shape = make()
            last = i >= count - 1
            remaining = need - have
            if last:
                m = _fit_scale(shape, ~claimed, remaining, hi=4.0)
            else:
                m = shape(1.0) & ~claimed
                if m.sum() > remaining:
                    m = _fit_scale(shape, ~claimed, remaining)
            if m.any():
                paint(m, cls, color, *depth_range)
                have += int(m.sum())

    def leaf_blob():
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        lobes = [(rng.normal(0, 0.12 * h), rng.normal(0, 0.12 * w), rng.uniform(0.10, 0.25),
                  rng.uniform(0.6, 1.6), rng.uniform(0, np.pi)) for _ in range(int(rng.integers(2, 5)))]

        def shape(scale):
            m = np.zeros((h, w), dtype=bool)
            for dy, dx, r, asp, th in lobes:
                rr = scale * r * min(h, w)
                m |= _ellipse(h, w, cy + dy * scale, cx + dx * scale, rr * asp, rr / asp, th)
            return m
        return shape

    def rigid_rect():
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        if rng.random() < 0.5:  # post
            hh, hw = rng.uniform(0.3, 0.6) * h, rng.uniform(0.03, 0.12) * w
        else:  # tray / gutter
            hh, hw = rng.uniform(0.04, 0.15) * h, rng.uniform(0.3, 0.6) * w

        def shape(scale):
            return _rect(h, w, cy, cx, hh * scale, hw * scale)
        return shape

    grow(ClassId.CANOPY, spec.canopy_blobs, leaf_blob, LEAF, spec.canopy_depth)
    grow(ClassId.RIGID_OBSTACLE, spec.rigid_rects, rigid_rect, RIGID, spec.rigid_depth)
    bg = ~claimed
    if bg.any():
        paint(bg, ClassId.BACKGROUND, BACKGROUND, *spec.background_depth)

    rgb = np.clip(colors + rng.normal(0.0, spec.noise_sigma, size=colors.shape), 0, 255)
    depth = np.clip(np.rint(depth_m * 1000.0), 1, 65535).astype(np.uint16)
    invalid = rng.random((h, w)) < spec.invalid_depth_fraction
    depth[invalid] = 0
    achieved = {c: float((classes == c).mean()) for c in ClassId}
    return rgb.astype(np.uint8), depth, classes, targets, achieved


def abundance(classes: np.ndarray) -> dict[ClassId, float]:
    return {c: float((classes == c).mean()) for c in ClassId}


def generate_scene(spec: SceneSpec, rng: np.random.Generator, max_rounds: int = 100):
    """One (rgb, depth, classes) triple whose abundances sit near the SceneSpec targets."""
    for _ in range(max_rounds):
        rgb, depth, classes, targets, got = _scene(spec, rng)
        slack = 2.0 / (spec.width * spec.height) + 0.002
        ok = all(abs(got[c] - targets[c]) <= slack for c in targets)
        if ok:
            return rgb, depth, classes
    raise UnsatisfiableSpec(f"abundance targets unreachable after {max_rounds} rounds")


def _check_dataset_means(spec: SceneSpec, means: dict) -> None:
    for c, target in spec.target.items():
        tol = spec.berry_tolerance if c == ClassId.STRAWBERRY else spec.tolerance
        if abs(means[c] - target) > tol:
            raise UnsatisfiableSpec(f"dataset mean for {c.name} is {means[c]:.4f}, target {target}")


def gen_dataset(spec: SceneSpec, count: int, seed: int, out_dir, split: str = "test") -> str:
    """Write ``count`` scenes to ``out_dir/split``; returns that directory."""
    rng = np.random.default_rng(seed)
    path = os.path.join(os.fspath(out_dir), split)
    os.makedirs(path, exist_ok=True)
    intr = CameraIntrinsics.default(spec.width, spec.height)
    totals = {c: 0.0 for c in ClassId}
    for i in range(count):
        rgb, depth, classes = generate_scene(spec, rng)
        for c, v in abundance(classes).items():
            totals[c] += v
        frame = Frame(i, i * FRAME_PERIOD_NS, rgb, depth, intr)
        base = os.path.join(path, f"{i:06d}")
        with open(base + ".rgb", "wb") as fh:
            fh.write(encode_frame(frame, Channel.RGB, Encoding.RAW))
        with open(base + ".depth", "wb") as fh:
            fh.write(encode_frame(frame, Channel.DEPTH, Encoding.RAW))
        with open(base + ".mask", "wb") as fh:
            fh.write(encode_mask(LabeledMask(classes), Encoding.RLE, i, frame.capture_ts))
    if count:
        _check_dataset_means(spec, {c: v / count for c, v in totals.items()})
    with open(os.path.join(path, "intrinsics.json"), "w") as fh:
        json.dump(intr.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


class Dataset:
    """Read access to one split written by ``gen_dataset``."""

    def __init__(self, path):
        path = os.fspath(path)
        if not os.path.exists(os.path.join(path, "intrinsics.json")):
            splits = sorted(d for d in os.listdir(path)
                            if os.path.exists(os.path.join(path, d, "intrinsics.json")))
            if not splits:
                raise FileNotFoundError(f"no dataset split under {path}")
            path = os.path.join(path, "test" if "test" in splits else splits[0])
        self.path = path
        with open(os.path.join(path, "intrinsics.json")) as fh:
            self.intrinsics = CameraIntrinsics.from_dict(json.load(fh))
        self.ids = sorted(int(f[:-5]) for f in os.listdir(path) if f.endswith(".mask"))
        self._frames: dict[int, Frame] = {}
        self._masks: dict[int, LabeledMask] = {}

    def __len__(self):
        return len(self.ids)

    def _read(self, i, ext) -> bytes:
        with open(os.path.join(self.path, f"{self.ids[i]:06d}.{ext}"), "rb") as fh:
            return fh.read()

    def frame(self, i: int) -> Frame:
        if i not in self._frames:
            rgb = decode_frame(self._read(i, "rgb"))
            depth = decode_frame(self._read(i, "depth"))
            self._frames[i] = Frame(rgb.frame_id, rgb.capture_ts, rgb.pixels(), depth.pixels(),
                                    self.intrinsics)
        return self._frames[i]

    def mask(self, i: int) -> LabeledMask:
        if i not in self._masks:
            self._masks[i] = decode_mask(self._read(i, "mask"))
        return self._masks[i]
