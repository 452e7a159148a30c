"""Experiment orchestration: robots, one edge endpoint, transport and links.

In sim mode every endpoint lives in one process under a single event
scheduler, so a (config, seed) pair fixes the whole record log. Each robot
runs a closed loop: capture, publish rgb and depth, send a trigger, wait for
the mask, build its planning maps, capture again.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from e5sh.core import Channel, Encoding, Frame, decode_frame, encode_frame
from e5sh.harness.scenes import Dataset
from e5sh.metrics.records import ExperimentRecord
from e5sh.mqtt import Broker, MqttClient, decode_remaining_length
from e5sh.netem import NS_PER_MS, NS_PER_S, EventScheduler, LinkPair, NetworkProfile, get_profile
from e5sh.occmap import build_planning_maps, extract_instances
from e5sh.perception import (ActionGoal, ActionServer, ConfigurationError, DelayedBackend,
                             FrameSynchronizer, HeuristicBackend, LatencyModel, OracleBackend,
                             decode_reply, decode_trigger, encode_reply, encode_trigger)
from e5sh.tcpros import TcprosPublisher, TcprosSubscriber
from e5sh.transport import SimConnection

logger = logging.getLogger(__name__)

TRANSPORTS = ("tcpros", "mqtt-qos0", "mqtt-qos1")
BACKENDS = ("oracle", "heuristic")
KINDS = ("rgb", "depth", "trigger", "mask")
PAPER_PAD_UP = 80_000
PAPER_PAD_DOWN = 16_000
MSG_TYPES = {"rgb": "e5sh/Envelope", "depth": "e5sh/Envelope", "trigger": "e5sh/Trigger",
             "mask": "e5sh/MaskReply"}

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


@dataclass
class ExperimentConfig:
    robots: int = 1
    frames: int = 10
    transport: str = "tcpros"
    network: object = "5g"       # profile name or profile dict
    backend: str = "oracle"
    model: str | None = "detectron2"
    platform: str = "edge"
    mode: str = "sim"
    seed: int = 0
    pad_up_bytes: int | None = None
    pad_down_bytes: int | None = None
    paper_sizes: bool = False
    workers: int = 3
    overhead_ms: float | None = None
    timeout_s: float = 10.0
    retry_timeout_ms: float = 200.0
    retry_cap: int | None = 10
    queue_depth: int = 30
    sync_tolerance_ms: float = 10.0
    build_maps: bool = True
    map_stride: int = 16
    map_resolution: float = 0.03
    map_ms: float = 0.0
    latency: dict | None = None
    name: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.transport not in TRANSPORTS:
            raise ConfigurationError(f"transport must be one of {TRANSPORTS}")
        if self.backend not in BACKENDS:
            raise ConfigurationError(f"backend must be one of {BACKENDS}")
        if self.mode not in ("sim", "live"):
            raise ConfigurationError("mode must be sim or live")
        if self.robots < 1 or self.frames < 0 or self.workers < 1:
            raise ConfigurationError("robots and workers must be >= 1, frames >= 0")
        if self.timeout_s <= 0:
            raise ConfigurationError("timeout_s must be positive")
        for k in ("pad_up_bytes", "pad_down_bytes"):
            v = getattr(self, k)
            if v is not None and v < 0:
                raise ConfigurationError(f"{k} must be non-negative")
        if self.mode == "live":
            prof = self.profile
            if prof.loss > 0:
                raise ConfigurationError("packet loss is virtual-only; use a loss-free profile in live mode")
            if prof.bandwidth_kBps is not None:
                raise ConfigurationError("bandwidth caps are virtual-only; not available in live mode")
            if self.overhead_ms is not None:
                raise ConfigurationError("overhead_ms is virtual-only; not available in live mode")
        latency = self.latency_model
        if self.model is not None:
            latency.dist(self.model, self.platform)

    @property
    def profile(self) -> NetworkProfile:
        return get_profile(self.network)

    @property
    def latency_model(self) -> LatencyModel:
        return LatencyModel.from_dict(self.latency) if self.latency else LatencyModel.default()

    @property
    def pads(self) -> tuple[int | None, int | None]:
        up, down = self.pad_up_bytes, self.pad_down_bytes
        if self.paper_sizes:
            up = PAPER_PAD_UP if up is None else up
            down = PAPER_PAD_DOWN if down is None else down
        return up, down

    @property
    def protocol(self) -> str:
        return {"tcpros": "tcpros", "mqtt-qos0": "qos0", "mqtt-qos1": "qos1"}[self.transport]

    @property
    def qos(self) -> int:
        return 1 if self.transport == "mqtt-qos1" else 0

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunResult:
    config: ExperimentConfig
    records: list
    links: dict = field(default_factory=dict)      # robot_id -> (up Link, down Link)
    untagged: dict = field(default_factory=dict)   # robot_id -> (up, down) control bytes
    mask_mismatches: int = 0
    map_stats: list = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    network_name: str = ""


# ---------------------------------------------------------------- byte metering

def _payload_tag(kind: str, payload) -> int | None:
    """Global frame sequence number carried by a payload, if it has one."""
    try:
        if kind in ("rgb", "depth"):
            return _U64.unpack_from(payload, 7)[0]
        if kind in ("trigger", "mask"):
            return _U64.unpack_from(payload, 0)[0]
    except struct.error:
        return None
    return None


def _padded_size(kind: str, actual: int, pads) -> int:
    up, down = pads
    if kind in ("rgb", "depth") and up is not None:
        return up // 2
    if kind == "mask" and down is not None:
        return down
    return actual


def mqtt_meter(pads, tag_of):
    """Meter for connections carrying MQTT packets (one packet per send)."""
    def meter(data):
        if not data or data[0] >> 4 != 3:
            return None, None
        rl, used = decode_remaining_length(data, 1)
        pos = 1 + used
        tlen = (data[pos] << 8) | data[pos + 1]
        topic = bytes(data[pos + 2:pos + 2 + tlen]).decode("utf-8", "replace")
        pos += 2 + tlen
        if (data[0] >> 1) & 0x3:
            pos += 2
        kind = topic.rsplit("/", 1)[-1]
        payload = memoryview(data)[pos:]
        g = _payload_tag(kind, payload)
        if g is None:
            return None, None
        return len(data) - len(payload) + _padded_size(kind, len(payload), pads), tag_of(g)
    return meter


def tcpros_meter(kind: str, pads, tag_of):
    """Meter for one TCPROS topic connection; handshake headers stay untagged."""
    magic_at = {"rgb": 4, "depth": 4, "mask": 12}.get(kind)

    def meter(data):
        if len(data) < 12:
            return None, None
        if kind == "trigger":
            if len(data) != 12 or _U32.unpack_from(data, 0)[0] != 8:
                return None, None
        elif bytes(data[magic_at:magic_at + 4]) != b"E5SH":
            return None, None
        payload = memoryview(data)[4:]
        g = _payload_tag(kind, payload)
        return 4 + _padded_size(kind, len(payload), pads), tag_of(g)
    return meter


# ---------------------------------------------------------------- transports

class _SimFabric:
    """Delivers (robot, kind, payload) messages between robots and the edge."""

    def __init__(self, cfg: ExperimentConfig, sched: EventScheduler, link_seed: int):
        self.cfg = cfg
        self.sched = sched
        self.robot_links = {}
        self.on_edge = lambda r, kind, payload: None
        self.on_robot = lambda r, kind, payload: None
        self.pads = cfg.pads
        self.link_seed = link_seed

    def tag_of(self, g: int):
        r, k = g % self.cfg.robots, g // self.cfg.robots
        return (r, k)


class _TcprosFabric(_SimFabric):
    def __init__(self, cfg, sched, link_seed):
        super().__init__(cfg, sched, link_seed)
        prof = cfg.profile
        self.publishers = {}
        self.subscribers = []
        for r in range(cfg.robots):
            lp = LinkPair(prof, sched, stream=r, reliable=True, name=f"robot{r}-", seed=link_seed)
            self.robot_links[r] = (lp.up, lp.down)
            for kind in KINDS:
                topic = f"/robot{r}/{kind}"
                robot_end, edge_end = SimConnection.pair(lp.up, lp.down, (f"robot{r}", "edge"))
                robot_end.meter = tcpros_meter(kind, self.pads, self.tag_of)
                edge_end.meter = tcpros_meter(kind, self.pads, self.tag_of)
                if kind == "mask":
                    pub = TcprosPublisher(topic, MSG_TYPES[kind], "/edge")
                    pub.accept(edge_end)
                    sub = TcprosSubscriber(topic, MSG_TYPES[kind],
                                           self._deliver(self.on_robot_cb, r, kind),
                                           f"/robot{r}", cfg.queue_depth)
                    sub.connect(robot_end)
                else:
                    pub = TcprosPublisher(topic, MSG_TYPES[kind], f"/robot{r}")
                    pub.accept(robot_end)
                    sub = TcprosSubscriber(topic, MSG_TYPES[kind],
                                           self._deliver(self.on_edge_cb, r, kind),
                                           "/edge", cfg.queue_depth)
                    sub.connect(edge_end)
                self.publishers[(r, kind)] = pub
                self.subscribers.append(sub)

    def _deliver(self, cb, r, kind):
        return lambda payload: cb(r, kind, payload)

    def on_edge_cb(self, r, kind, payload):
        self.on_edge(r, kind, payload)

    def on_robot_cb(self, r, kind, payload):
        self.on_robot(r, kind, payload)

    def ready(self) -> bool:
        return all(s.connected for s in self.subscribers)

    def start(self) -> None:
        pass

    def robot_send(self, r, kind, payload):
        self.publishers[(r, kind)].publish(payload)

    def edge_send(self, r, kind, payload):
        self.publishers[(r, kind)].publish(payload)

    def counters(self) -> dict:
        return {"overflow": sum(s.overflow for s in self.subscribers)}


class _MqttFabric(_SimFabric):
    def __init__(self, cfg, sched, link_seed):
        super().__init__(cfg, sched, link_seed)
        prof = cfg.profile
        rto = int(round(cfg.retry_timeout_ms * NS_PER_MS))
        self.broker = Broker(rto, cfg.retry_cap, scheduler=sched)
        meter = mqtt_meter(self.pads, self.tag_of)
        self.clients = {}
        for r in range(cfg.robots):
            lp = LinkPair(prof, sched, stream=r, name=f"robot{r}-", seed=link_seed)
            self.robot_links[r] = (lp.up, lp.down)
            robot_end, broker_end = SimConnection.pair(lp.up, lp.down, (f"robot{r}", "broker"))
            robot_end.meter = meter
            broker_end.meter = meter
            self.broker.attach(broker_end)
            self.clients[r] = MqttClient(f"robot{r}", robot_end, self._robot_msg(r), rto,
                                         cfg.retry_cap, scheduler=sched)
        # the broker is colocated with the edge server
        lp = LinkPair(get_profile("ideal"), sched, stream=cfg.robots, name="edge-")
        edge_end, broker_end = SimConnection.pair(lp.up, lp.down, ("edge", "broker"))
        self.broker.attach(broker_end)
        self.edge = MqttClient("edge", edge_end, self._edge_msg, rto, cfg.retry_cap,
                               scheduler=sched)
        self._subs_needed = {}

    def _robot_msg(self, r):
        def on_message(p):
            self.on_robot(r, p.topic.rsplit("/", 1)[-1], p.payload)
        return on_message

    def _edge_msg(self, p):
        parts = p.topic.split("/")
        self.on_edge(int(parts[1]), parts[2], p.payload)

    def start(self) -> None:
        q = self.cfg.qos
        clients = [("edge", self.edge, [f"robot/{r}/{k}" for r in range(self.cfg.robots)
                                        for k in ("rgb", "depth", "trigger")])]
        clients += [(r, c, [f"robot/{r}/mask"]) for r, c in self.clients.items()]
        for _, client, filters in clients:
            def subscribe_all(client=client, filters=filters):
                for f in filters:
                    client.subscribe(f, q)
            client.on_connect = subscribe_all
            self._subs_needed[client.client_id] = (client, filters)
            client.connect()

    def ready(self) -> bool:
        return all(c.connected and all(f in c.subscribed for f in fs)
                   for c, fs in self._subs_needed.values())

    def robot_send(self, r, kind, payload):
        self.clients[r].publish(f"robot/{r}/{kind}", payload, self.cfg.qos)

    def edge_send(self, r, kind, payload):
        self.edge.publish(f"robot/{r}/{kind}", payload, self.cfg.qos)

    def counters(self) -> dict:
        out = {f"broker_{k}": v for k, v in self.broker.counters.items()}
        out["duplicates_at_robots"] = sum(c.counters["duplicates"] for c in self.clients.values())
        return out


# ---------------------------------------------------------------- endpoints

def make_backend(cfg: ExperimentConfig, dataset: Dataset):
    if cfg.backend == "oracle":
        n = len(dataset)
        inner = OracleBackend(lambda fid: dataset.mask(fid % n))
    else:
        inner = HeuristicBackend()
    if cfg.model is None:
        return inner
    return DelayedBackend(inner, cfg.latency_model, cfg.model, cfg.platform, seed=cfg.seed)


def derive_link_seed(seed: int, profile: NetworkProfile) -> int:
    return int(np.random.SeedSequence([int(seed), int(profile.seed)]).generate_state(1)[0])


class _Edge:
    """Edge endpoint: per-robot synchronizer, pending triggers, shared server."""

    def __init__(self, cfg, sched, fabric, server, intrinsics, records, residual_ns):
        self.cfg = cfg
        self.sched = sched
        self.fabric = fabric
        self.server = server
        self.intrinsics = intrinsics
        self.records = records
        self.residual_ns = residual_ns
        tol = int(round(cfg.sync_tolerance_ms * NS_PER_MS))
        self.syncs = {r: FrameSynchronizer(tol, cfg.queue_depth) for r in range(cfg.robots)}
        self.pairs: dict[int, dict[int, Frame]] = {r: {} for r in range(cfg.robots)}
        self.waiting: dict[int, set[int]] = {r: set() for r in range(cfg.robots)}
        self.dispatched: set[int] = set()
        self.sync_mismatch = 0

    def on_message(self, r, kind, payload):
        if kind in ("rgb", "depth"):
            env = decode_frame(bytes(payload))
            item = (env.frame_id, env.capture_ts, env.pixels())
            pair = self.syncs[r].push(kind, env.capture_ts, item)
            if pair is not None:
                rgb, dep = pair
                if rgb[0] != dep[0]:
                    self.sync_mismatch += 1
                    return
                g = rgb[0]
                if g in self.dispatched:
                    return
                self.pairs[r][g] = Frame(g, rgb[1], rgb[2], dep[2], self.intrinsics)
                if g in self.waiting[r]:
                    self._dispatch(r, g)
        elif kind == "trigger":
            g = decode_trigger(bytes(payload))
            if g in self.dispatched:
                return
            if g in self.pairs[r]:
                self._dispatch(r, g)
            else:
                self.waiting[r].add(g)

    def _dispatch(self, r, g):
        self.dispatched.add(g)
        self.waiting[r].discard(g)
        frame = self.pairs[r].pop(g)
        for old in [k for k in self.pairs[r] if k < g]:
            del self.pairs[r][old]
        if self.residual_ns > 0:
            self.sched.call_later(self.residual_ns, self._submit, r, g, frame)
        else:
            self._submit(r, g, frame)

    def _submit(self, r, g, frame):
        rec = self.records[(r, g // self.cfg.robots)]
        rec.t_goal = self.sched.now
        goal = ActionGoal(g, frame, r)
        self.server.submit(goal, lambda goal, t0, t1: self._done(r, g, rec, goal, t0, t1))

    def _done(self, r, g, rec, goal, t0, t1):
        if goal.result is None or goal.error:
            logger.warning("goal %d aborted: %s", g, goal.error)
            return
        rec.t_seg_start, rec.t_seg_end = t0, t1
        self.fabric.edge_send(r, "mask", encode_reply(g, goal.result, g, goal.frame.capture_ts))


class _Robot:
    def __init__(self, r, cfg, sched, fabric, dataset, records, result):
        self.r = r
        self.cfg = cfg
        self.sched = sched
        self.fabric = fabric
        self.dataset = dataset
        self.records = records
        self.result = result
        self.k = -1
        self.done = False
        self.awaiting: int | None = None
        self.timer = None

    def next_frame(self):
        self.k += 1
        if self.k >= self.cfg.frames:
            self.done = True
            return
        cfg, r, k = self.cfg, self.r, self.k
        g = k * cfg.robots + r
        src = self.dataset.frame(g % len(self.dataset))
        now = self.sched.now
        frame = Frame(g, now, src.rgb, src.depth, src.intrinsics)
        rec = ExperimentRecord(k, r, cfg.protocol, self.result.network_name,
                               cfg.model or "none", cfg.platform if cfg.model else "none")
        self.records[(r, k)] = rec
        rec.t_capture = now
        self.awaiting = g
        self.timer = self.sched.call_later(int(cfg.timeout_s * NS_PER_S), self._timeout, g)
        rec.t_sent = now
        self.fabric.robot_send(r, "rgb", encode_frame(frame, Channel.RGB, Encoding.RAW))
        self.fabric.robot_send(r, "depth", encode_frame(frame, Channel.DEPTH, Encoding.RAW))
        self.fabric.robot_send(r, "trigger", encode_trigger(g))

    def _timeout(self, g):
        if self.awaiting != g:
            return
        logger.info("robot %d frame %d timed out", self.r, self.k)
        self.awaiting = None
        self.next_frame()

    def on_message(self, r, kind, payload):
        if kind != "mask":
            return
        g, mask = decode_reply(bytes(payload))
        if g != self.awaiting:
            return  # duplicate or late reply
        self.awaiting = None
        self.timer.cancel()
        rec = self.records[(self.r, self.k)]
        rec.t_result = self.sched.now
        n = len(self.dataset)
        src = self.dataset.frame(g % n)
        if self.cfg.backend == "oracle" and not np.array_equal(mask.classes, self.dataset.mask(g % n).classes):
            self.result.mask_mismatches += 1
        if self.cfg.build_maps:
            insts = extract_instances(mask)
            target = next((i for i in insts if i.is_target), None)
            obstacles, berries = build_planning_maps(mask, src.depth, src.intrinsics, target,
                                                     self.cfg.map_resolution, stride=self.cfg.map_stride)
            self.result.map_stats.append((self.r, self.k, len(insts),
                                          len(obstacles.occupied_keys()), len(berries.occupied_keys())))
        map_ns = int(round(self.cfg.map_ms * NS_PER_MS))
        self.sched.call_later(map_ns, self._map_done, rec)

    def _map_done(self, rec):
        rec.t_map_done = self.sched.now
        self.next_frame()


def expected_network_ms(cfg: ExperimentConfig, samples: int = 20_000) -> float:
    """Mean request-to-result network time per frame, by seeded Monte Carlo.

    The mask can only be requested once the last of the three uplink
    messages lands, so the uplink term is a maximum over three draws. On
    retransmitting transports each loss adds one retry timeout.
    """
    prof = cfg.profile
    rng = np.random.default_rng(0)
    rto = cfg.retry_timeout_ms

    def leg(k):
        d = np.array([[prof.delay.sample_ms(rng) for _ in range(k)] for _ in range(samples)])
        if prof.loss > 0 and cfg.transport != "mqtt-qos0":
            d = d + rto * rng.geometric(1.0 - prof.loss, size=d.shape) - rto
        return np.maximum.accumulate(d, axis=1)[:, -1]

    total = float(np.mean(leg(3) + leg(1)))
    if prof.bandwidth_kBps:
        up, down = cfg.pads
        total += ((up or 0) + (down or 0)) / (prof.bandwidth_kBps * 1000.0) * 1000.0
    return total


def _residual_ns(cfg: ExperimentConfig) -> int:
    """Fixed edge-side delay that brings the mean network overhead to ``overhead_ms``."""
    if cfg.overhead_ms is None:
        return 0
    residual = max(0.0, cfg.overhead_ms - expected_network_ms(cfg))
    return int(round(residual * NS_PER_MS))


def run_sim(cfg: ExperimentConfig, dataset: Dataset) -> RunResult:
    sched = EventScheduler()
    prof = cfg.profile
    link_seed = derive_link_seed(cfg.seed, prof)
    fabric = (_TcprosFabric if cfg.transport == "tcpros" else _MqttFabric)(cfg, sched, link_seed)
    records: dict = {}
    result = RunResult(cfg, [], network_name=prof.name)
    server = ActionServer(make_backend(cfg, dataset), cfg.workers, scheduler=sched)
    edge = _Edge(cfg, sched, fabric, server, dataset.intrinsics, records, _residual_ns(cfg))
    robots = [_Robot(r, cfg, sched, fabric, dataset, records, result) for r in range(cfg.robots)]
    fabric.on_edge = edge.on_message
    fabric.on_robot = lambda r, kind, payload: robots[r].on_message(r, kind, payload)

    fabric.start()
    sched.run(stop=fabric.ready, until=sched.now + 60 * NS_PER_S)
    if not fabric.ready():
        raise RuntimeError("transport setup did not complete within 60 s virtual")
    for rb in robots:
        rb.next_frame()
    sched.run(stop=lambda: all(rb.done for rb in robots))

    result.records = [records[key] for key in sorted(records)]
    result.links = fabric.robot_links
    for r, (up, down) in fabric.robot_links.items():
        tagged_up = sum(v for (rr, _), v in up.tagged_bytes.items() if rr == r)
        tagged_down = sum(v for (rr, _), v in down.tagged_bytes.items() if rr == r)
        result.untagged[r] = (up.bytes - tagged_up, down.bytes - tagged_down)
        for (rr, k), v in up.tagged_bytes.items():
            records[(rr, k)].bytes_up += v
        for (rr, k), v in down.tagged_bytes.items():
            records[(rr, k)].bytes_down += v
    result.counters = {"sync_mismatch": edge.sync_mismatch, "completed_goals": server.completed,
                       **fabric.counters()}
    return result


def run_experiment(cfg: ExperimentConfig, data) -> RunResult:
    dataset = data if isinstance(data, Dataset) else Dataset(data)
    if len(dataset) == 0:
        raise ConfigurationError("dataset is empty")
    if cfg.mode == "sim":
        return run_sim(cfg, dataset)
    from e5sh.harness.live import run_live
    return run_live(cfg, dataset)
