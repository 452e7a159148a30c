"""Robot-to-edge segmentation service.

The edge side synchronizes the incoming RGB and depth streams, turns a
trigger request into an action goal, and runs it through a segmentation
backend. Backends here are stand-ins: an oracle that returns ground truth, a
nearest-palette-colour heuristic, and a wrapper that adds compute latency
drawn from a per-(model, platform) table.
"""

from __future__ import annotations

import enum
import logging
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from e5sh.core import ClassId, Frame, LabeledMask, decode_mask, encode_mask
from e5sh.netem import NS_PER_MS, DelayDist

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE_NS = 10 * NS_PER_MS
DEFAULT_QUEUE_DEPTH = 30
DEFAULT_WORKERS = 3


class NotReady(RuntimeError):
    """Trigger arrived before any synchronized frame pair."""


class BackendFailure(RuntimeError):
    pass


class ConfigurationError(ValueError):
    pass


class FrameSynchronizer:
    """Pairs RGB and depth frames whose timestamps lie within ``tolerance_ns``.

    Items are consumed by at most one pair; a full queue evicts its oldest item.
    """

    def __init__(self, tolerance_ns: int = DEFAULT_TOLERANCE_NS, depth: int = DEFAULT_QUEUE_DEPTH):
        self.tolerance_ns = int(tolerance_ns)
        self.queues = {"rgb": deque(), "depth": deque()}
        self.depth = depth
        self.evicted = 0
        self.pairs = 0
        self.latest: tuple | None = None

    def push(self, channel: str, ts: int, item) -> tuple | None:
        """Buffer ``item``; return the oldest admissible (rgb, depth) pair, if any."""
        channel = {"rgb": "rgb", "depth": "depth", 1: "rgb", 2: "depth"}[
            channel.lower() if isinstance(channel, str) else int(channel)]
        q = self.queues[channel]
        if len(q) >= self.depth:
            q.popleft()
            self.evicted += 1
        q.append((int(ts), item))
        return self._match()

    def _match(self) -> tuple | None:
        rgb_q, depth_q = self.queues["rgb"], self.queues["depth"]
        for i, (ts_r, rgb) in enumerate(rgb_q):
            for j, (ts_d, dep) in enumerate(depth_q):
                if abs(ts_r - ts_d) <= self.tolerance_ns:
                    del rgb_q[i]
                    del depth_q[j]
                    self.pairs += 1
                    self.latest = (rgb, dep)
                    return rgb, dep
        return None


def sync_push(sync: FrameSynchronizer, channel, frame) -> tuple | None:
    ts = frame.capture_ts if hasattr(frame, "capture_ts") else frame[0]
    return sync.push(channel, ts, frame)


class ActionStatus(enum.Enum):
    PENDING = "pending"
    ACTIVE = "active"
    SUCCEEDED = "succeeded"
    ABORTED = "aborted"


_TRANSITIONS = {
    ActionStatus.PENDING: {ActionStatus.ACTIVE},
    ActionStatus.ACTIVE: {ActionStatus.SUCCEEDED, ActionStatus.ABORTED},
    ActionStatus.SUCCEEDED: set(),
    ActionStatus.ABORTED: set(),
}


@dataclass
class ActionGoal:
    goal_id: int
    frame: Frame
    robot_id: int = 0
    status: ActionStatus = ActionStatus.PENDING
    result: LabeledMask | None = None
    error: str | None = None
    history: list = field(default_factory=lambda: [ActionStatus.PENDING])

    def transition(self, new: ActionStatus) -> None:
        if new not in _TRANSITIONS[self.status]:
            raise RuntimeError(f"goal {self.goal_id}: illegal transition {self.status.name} -> {new.name}")
        self.status = new
        self.history.append(new)


# ---------------------------------------------------------------- backends

PALETTE = np.array([
    (200, 30, 40),    # strawberry red
    (40, 140, 50),    # canopy green
    (120, 120, 130),  # rigid grey
    (230, 230, 220),  # background
], dtype=np.float64)


def heuristic_segment(rgb: np.ndarray) -> LabeledMask:
    """Nearest palette colour per pixel; ties go to the lower class id.

    Confidence is ``1 - d1 / (d1 + d2)`` for the nearest and second-nearest
    distances, which already lies in [0.5, 1].
    """
    px = np.asarray(rgb, dtype=np.float64)
    d = np.sqrt(((px[..., None, :] - PALETTE) ** 2).sum(axis=-1))  # (h, w, 4)
    order = np.argsort(d, axis=-1, kind="stable")
    classes = order[..., 0].astype(np.uint8)
    d1 = np.take_along_axis(d, order[..., :1], axis=-1)[..., 0]
    d2 = np.take_along_axis(d, order[..., 1:2], axis=-1)[..., 0]
    denom = d1 + d2
    conf = np.where(denom > 0, 1.0 - d1 / np.where(denom > 0, denom, 1.0), 1.0)
    return LabeledMask(classes, np.clip(conf, 0.5, 1.0))


class SegmentationBackend:
    kind = "base"

    def segment(self, frame: Frame) -> LabeledMask:
        raise NotImplementedError

    def compute_delay_ns(self, goal: ActionGoal, rng: np.random.Generator | None) -> int:
        return 0


class OracleBackend(SegmentationBackend):
    kind = "oracle"

    def __init__(self, ground_truth: Callable[[int], LabeledMask] | Mapping[int, LabeledMask]):
        self._lookup = ground_truth if callable(ground_truth) else ground_truth.__getitem__

    def segment(self, frame: Frame) -> LabeledMask:
        try:
            gt = self._lookup(frame.frame_id)
        except (KeyError, IndexError) as exc:
            raise BackendFailure(f"no ground truth for frame {frame.frame_id}") from exc
        return LabeledMask(gt.classes, None)


class HeuristicBackend(SegmentationBackend):
    kind = "heuristic"

    def segment(self, frame: Frame) -> LabeledMask:
        return heuristic_segment(frame.rgb)


MODELS = ("detectron2", "d2go8", "d2go32")
PLATFORMS = ("edge", "njxn")


def _normal(mean_ms: float) -> DelayDist:
    return DelayDist.normal(mean_ms, 0.1 * mean_ms)


# Edge means: ~12.2 FPS for Detectron2, ~30 ms for D2Go; NJXN means are the
# edge means times the measured median speedup of each model.
SPEEDUP_NJXN = {"detectron2": 18.7, "d2go8": 4.3, "d2go32": 4.2}
EDGE_MEAN_MS = {"detectron2": 82.0, "d2go8": 30.0, "d2go32": 30.0}


@dataclass
class LatencyModel:
    table: dict = field(default_factory=dict)

    @classmethod
    def default(cls) -> "LatencyModel":
        t = {}
        for m in MODELS:
            t[(m, "edge")] = _normal(EDGE_MEAN_MS[m])
            t[(m, "njxn")] = _normal(EDGE_MEAN_MS[m] * SPEEDUP_NJXN[m])
        return cls(t)

    def dist(self, model: str, platform: str) -> DelayDist:
        try:
            return self.table[(model, platform)]
        except KeyError:
            raise ConfigurationError(f"no latency entry for ({model}, {platform})") from None

    def mean_ms(self, model: str, platform: str) -> float:
        return self.dist(model, platform).mean_ms()

    @classmethod
    def from_dict(cls, d: dict) -> "LatencyModel":
        t = {}
        for key, spec in d.items():
            model, platform = key.split("/")
            t[(model, platform)] = DelayDist(spec["kind"], tuple(spec["params"]))
        return cls(t)

    def to_dict(self) -> dict:
        return {f"{m}/{p}": d.to_dict() for (m, p), d in sorted(self.table.items())}


def sample_compute_delay(latency: LatencyModel, model: str, platform: str,
                         rng: np.random.Generator) -> float:
    """One compute-time sample in milliseconds."""
    return latency.dist(model, platform).sample_ms(rng)


class DelayedBackend(SegmentationBackend):
    """Adds sampled compute latency to an inner backend.

    With ``seed`` set, each goal draws from its own stream keyed by
    (seed, robot, goal); runs that differ only in model/platform then see
    the same standard-normal draw per frame (common random numbers).
    """

    kind = "delayed"

    def __init__(self, inner: SegmentationBackend, latency: LatencyModel, model: str,
                 platform: str, seed: int | None = None):
        latency.dist(model, platform)
        self.inner = inner
        self.latency = latency
        self.model = model
        self.platform = platform
        self.seed = seed

    def segment(self, frame: Frame) -> LabeledMask:
        return self.inner.segment(frame)

    def compute_delay_ns(self, goal: ActionGoal, rng: np.random.Generator | None) -> int:
        if self.seed is not None:
            rng = np.random.default_rng([int(self.seed), int(goal.robot_id), int(goal.goal_id), 7])
        elif rng is None:
            rng = np.random.default_rng()
        ms = sample_compute_delay(self.latency, self.model, self.platform, rng)
        return int(round(ms * NS_PER_MS))


# ---------------------------------------------------------------- action server

class ActionServer:
    """Runs goals on up to ``workers`` concurrent slots in virtual time.

    Goals wait in one FIFO; ``on_done(goal, t_start, t_end)`` fires at
    completion. Without a scheduler goals run synchronously.
    """

    def __init__(self, backend: SegmentationBackend, workers: int = DEFAULT_WORKERS,
                 scheduler=None, rng: np.random.Generator | None = None):
        if workers < 1:
            raise ConfigurationError("workers must be >= 1")
        self.backend = backend
        self.workers = workers
        self.scheduler = scheduler
        self.rng = rng
        self.busy = 0
        self.queue: deque = deque()
        self.completed = 0

    def submit(self, goal: ActionGoal, on_done: Callable[[ActionGoal, int, int], None]) -> None:
        self.queue.append((goal, on_done))
        self._dispatch()

    def _dispatch(self) -> None:
        while self.busy < self.workers and self.queue:
            goal, on_done = self.queue.popleft()
            self._start(goal, on_done)

    def _start(self, goal, on_done) -> None:
        goal.transition(ActionStatus.ACTIVE)
        now = self.scheduler.now if self.scheduler is not None else 0
        try:
            goal.result = self.backend.segment(goal.frame)
            delay = self.backend.compute_delay_ns(goal, self.rng)
        except Exception as exc:  # any backend fault aborts the goal
            goal.error = str(exc)
            goal.transition(ActionStatus.ABORTED)
            on_done(goal, now, now)
            return
        if self.scheduler is None:
            goal.transition(ActionStatus.SUCCEEDED)
            self.completed += 1
            on_done(goal, now, now + delay)
            return
        self.busy += 1
        self.scheduler.call_later(delay, self._finish, goal, on_done, now, label="segment")

    def _finish(self, goal, on_done, t_start) -> None:
        self.busy -= 1
        goal.transition(ActionStatus.SUCCEEDED)
        self.completed += 1
        on_done(goal, t_start, self.scheduler.now)
        self._dispatch()


class ActionClient:
    """Edge-side client: owns the synchronizer and turns triggers into goals."""

    def __init__(self, server: ActionServer, sync: FrameSynchronizer | None = None,
                 robot_id: int = 0, clock=None):
        self.server = server
        self.sync = sync or FrameSynchronizer()
        self.robot_id = robot_id
        self.clock = clock
        self.goals: dict[int, ActionGoal] = {}
        self.timestamps: dict[int, dict[str, int]] = {}

    def _now(self) -> int:
        return self.clock.now() if self.clock is not None else 0

    def push(self, channel, frame: Frame):
        return self.sync.push(channel, frame.capture_ts, frame)

    def trigger(self, goal_id: int, on_result: Callable[[ActionGoal], None] | None = None) -> ActionGoal:
        """Wrap the latest synchronized pair in a goal and run it.

        Raises ``NotReady`` when no pair has been synchronized yet. A failed
        backend leaves the goal ABORTED with ``error`` set.
        """
        if self.sync.latest is None:
            raise NotReady("no synchronized frame pair available")
        rgb, depth = self.sync.latest
        frame = rgb if isinstance(rgb, Frame) else Frame(rgb[0], rgb[1], rgb[2], depth[2], rgb[3])
        goal = ActionGoal(goal_id, frame, self.robot_id)
        self.goals[goal_id] = goal
        ts = self.timestamps.setdefault(goal_id, {})
        ts["t_request"] = ts["t_goal_sent"] = self._now()

        def done(g, t_start, t_end):
            ts["t_seg_start"] = t_start
            ts["t_seg_end"] = t_end
            ts["t_result_received"] = t_end if self.clock is None else self._now()
            if on_result:
                on_result(g)

        self.server.submit(goal, done)
        return goal


# ---------------------------------------------------------------- wire payloads

_GOAL = struct.Struct("<Q")


def encode_trigger(goal_id: int) -> bytes:
    return _GOAL.pack(goal_id)


def decode_trigger(data: bytes) -> int:
    if len(data) != 8:
        raise ValueError("trigger payload must be 8 bytes")
    return _GOAL.unpack(data)[0]


def encode_reply(goal_id: int, mask: LabeledMask, frame_id: int = 0, capture_ts: int = 0) -> bytes:
    return _GOAL.pack(goal_id) + encode_mask(mask, frame_id=frame_id, capture_ts=capture_ts)


def decode_reply(data: bytes) -> tuple[int, LabeledMask]:
    if len(data) < 8:
        raise ValueError("reply shorter than its goal id")
    return _GOAL.unpack_from(data)[0], decode_mask(data[8:])


__all__ = [
    "ActionClient", "ActionGoal", "ActionServer", "ActionStatus", "BackendFailure", "ClassId",
    "ConfigurationError", "DelayedBackend", "FrameSynchronizer", "HeuristicBackend",
    "LatencyModel", "NotReady", "OracleBackend", "PALETTE", "SegmentationBackend",
    "decode_reply", "decode_trigger", "encode_reply", "encode_trigger", "heuristic_segment",
    "sample_compute_delay", "sync_push",
]
