"""Live mode: the same endpoints over real loopback sockets on a wall clock.

Intended for smoke tests. Delays are injected at the sender; loss and
bandwidth caps exist only in sim mode.
"""

from __future__ import annotations

import asyncio
import logging

from e5sh.core import Clock
from e5sh.harness.experiment import (KINDS, MSG_TYPES, ExperimentConfig, RunResult, _Edge,
                                     _Robot, derive_link_seed, make_backend, mqtt_meter,
                                     tcpros_meter)
from e5sh.harness.scenes import Dataset
from e5sh.mqtt import Broker, MqttClient
from e5sh.netem import NS_PER_MS, NS_PER_S, link_rng
from e5sh.perception import ActionServer, ConfigurationError
from e5sh.tcpros import TcprosPublisher, TcprosSubscriber
from e5sh.transport import StreamConnection

logger = logging.getLogger(__name__)


class WallScheduler:
    """Scheduler facade over the running asyncio loop, in wall-clock ns."""

    def __init__(self, loop: asyncio.AbstractEventLoop):
        self.loop = loop
        self.clock = Clock(Clock.WALL)

    @property
    def now(self) -> int:
        return self.clock.now()

    def call_at(self, due: int, callback, *args, label: str = ""):
        return self.call_later(max(0, int(due) - self.now), callback, *args, label=label)

    def call_later(self, delay: int, callback, *args, label: str = ""):
        return self.loop.call_later(max(0, int(delay)) / NS_PER_S, callback, *args)


def _check(cfg: ExperimentConfig) -> None:
    prof = cfg.profile
    if prof.loss > 0:
        raise ConfigurationError("packet loss is virtual-only; use a loss-free profile in live mode")
    if prof.bandwidth_kBps is not None or cfg.overhead_ms is not None:
        raise ConfigurationError("bandwidth caps and overhead_ms are virtual-only")


async def _open(host, port, name, delay, meter):
    reader, writer = await asyncio.open_connection(host, port)
    conn = StreamConnection(reader, writer, name, delay)
    conn.meter = meter
    return conn


class _LiveFabric:
    def __init__(self, cfg, sched, rng_seed):
        self.cfg = cfg
        self.sched = sched
        self.on_edge = lambda r, kind, payload: None
        self.on_robot = lambda r, kind, payload: None
        self.pads = cfg.pads
        self.servers = []
        self.conns = []
        self.up_conns = {r: [] for r in range(cfg.robots)}
        self.down_conns = {r: [] for r in range(cfg.robots)}
        prof = cfg.profile
        self._rngs = {}

        def delay_fn(key):
            rng = self._rngs.setdefault(key, link_rng(rng_seed, len(self._rngs)))
            return lambda: prof.delay.sample_ms(rng) / 1000.0
        self.delay_fn = delay_fn

    def tag_of(self, g):
        return (g % self.cfg.robots, g // self.cfg.robots)

    async def close(self):
        for c in self.conns:
            c.close()
        for s in self.servers:
            s.close()
            await s.wait_closed()


class _LiveTcpros(_LiveFabric):
    async def start(self):
        cfg = self.cfg
        self.publishers = {}
        self.subscribers = []
        for r in range(cfg.robots):
            for kind in KINDS:
                topic = f"/robot{r}/{kind}"
                to_robot = kind == "mask"
                pub = TcprosPublisher(topic, MSG_TYPES[kind], "/edge" if to_robot else f"/robot{r}")
                meter = tcpros_meter(kind, self.pads, self.tag_of)
                side = self.down_conns[r] if to_robot else self.up_conns[r]

                def on_accept(reader, writer, pub=pub, meter=meter, side=side, r=r, kind=kind):
                    conn = StreamConnection(reader, writer, f"{pub.topic}-pub",
                                            self.delay_fn((r, kind, "pub")))
                    conn.meter = meter
                    side.append(conn)
                    self.conns.append(conn)
                    pub.accept(conn)
                    conn.start()

                server = await asyncio.start_server(on_accept, "127.0.0.1", 0)
                self.servers.append(server)
                port = server.sockets[0].getsockname()[1]
                cb = (lambda payload, r=r, kind=kind: self.on_robot(r, kind, payload)) if to_robot \
                    else (lambda payload, r=r, kind=kind: self.on_edge(r, kind, payload))
                conn = await _open("127.0.0.1", port, f"{topic}-sub", self.delay_fn((r, kind, "sub")), meter)
                self.conns.append(conn)
                sub = TcprosSubscriber(topic, MSG_TYPES[kind], cb,
                                       "/edge" if not to_robot else f"/robot{r}", cfg.queue_depth)
                sub.connect(conn)
                conn.start()
                self.publishers[(r, kind)] = pub
                self.subscribers.append(sub)

    def ready(self):
        return all(s.connected for s in self.subscribers) and \
            all(len(p.endpoints) == 1 for p in self.publishers.values())

    def robot_send(self, r, kind, payload):
        self.publishers[(r, kind)].publish(payload)

    edge_send = robot_send


class _LiveMqtt(_LiveFabric):
    async def start(self):
        cfg = self.cfg
        rto = int(round(cfg.retry_timeout_ms * NS_PER_MS))
        self.broker = Broker(rto, cfg.retry_cap, scheduler=self.sched)
        meter = mqtt_meter(self.pads, self.tag_of)
        self._n_accept = 0

        def on_accept(reader, writer):
            conn = StreamConnection(reader, writer, "broker", self.delay_fn(("broker", self._n_accept)))
            self._n_accept += 1
            conn.meter = meter
            self.conns.append(conn)
            self.broker.attach(conn)
            conn.start()

        server = await asyncio.start_server(on_accept, "127.0.0.1", 0)
        self.servers.append(server)
        port = server.sockets[0].getsockname()[1]
        q = cfg.qos
        self.clients = {}
        self._needed = []
        for r in range(cfg.robots):
            conn = await _open("127.0.0.1", port, f"robot{r}", self.delay_fn(("robot", r)), meter)
            self.conns.append(conn)
            self.up_conns[r].append(conn)
            cl = MqttClient(f"robot{r}", conn,
                            lambda p, r=r: self.on_robot(r, p.topic.rsplit("/", 1)[-1], p.payload),
                            rto, cfg.retry_cap, scheduler=self.sched)
            self.clients[r] = cl
            self._needed.append((cl, [f"robot/{r}/mask"]))
        # the edge's own connection carries the masks; count them as downlink
        conn = await _open("127.0.0.1", port, "edge", None, meter)
        self.conns.append(conn)
        for r in range(cfg.robots):
            self.down_conns[r].append(conn)

        def edge_msg(p):
            parts = p.topic.split("/")
            self.on_edge(int(parts[1]), parts[2], p.payload)
        self.edge = MqttClient("edge", conn, edge_msg, rto, cfg.retry_cap, scheduler=self.sched)
        self._needed.append((self.edge, [f"robot/{r}/{k}" for r in range(cfg.robots)
                                         for k in ("rgb", "depth", "trigger")]))
        for client, filters in self._needed:
            def subscribe_all(client=client, filters=filters):
                for f in filters:
                    client.subscribe(f, q)
            client.on_connect = subscribe_all
            client.conn.start()
            client.connect()

    def ready(self):
        return all(c.connected and all(f in c.subscribed for f in fs) for c, fs in self._needed)

    def robot_send(self, r, kind, payload):
        self.clients[r].publish(f"robot/{r}/{kind}", payload, self.cfg.qos)

    def edge_send(self, r, kind, payload):
        self.edge.publish(f"robot/{r}/{kind}", payload, self.cfg.qos)


async def _run(cfg: ExperimentConfig, dataset: Dataset, setup_timeout_s: float = 10.0) -> RunResult:
    loop = asyncio.get_running_loop()
    sched = WallScheduler(loop)
    prof = cfg.profile
    fabric = (_LiveTcpros if cfg.transport == "tcpros" else _LiveMqtt)(
        cfg, sched, derive_link_seed(cfg.seed, prof))
    records: dict = {}
    result = RunResult(cfg, [], network_name=prof.name)
    server = ActionServer(make_backend(cfg, dataset), cfg.workers, scheduler=sched)
    edge = _Edge(cfg, sched, fabric, server, dataset.intrinsics, records, 0)
    robots = [_Robot(r, cfg, sched, fabric, dataset, records, result) for r in range(cfg.robots)]
    fabric.on_edge = edge.on_message
    fabric.on_robot = lambda r, kind, payload: robots[r].on_message(r, kind, payload)
    try:
        await fabric.start()
        deadline = loop.time() + setup_timeout_s
        while not fabric.ready():
            if loop.time() > deadline:
                raise RuntimeError("live transport setup timed out")
            await asyncio.sleep(0.001)
        for rb in robots:
            rb.next_frame()
        while not all(rb.done for rb in robots):
            await asyncio.sleep(0.002)
    finally:
        await fabric.close()
    result.records = [records[k] for k in sorted(records)]
    for r in range(cfg.robots):
        for conns, attr in ((fabric.up_conns[r], "bytes_up"), (fabric.down_conns[r], "bytes_down")):
            for c in conns:
                for (rr, k), v in c.tagged_bytes.items():
                    if rr == r and (rr, k) in records:
                        setattr(records[(rr, k)], attr, getattr(records[(rr, k)], attr) + v)
    result.counters = {"sync_mismatch": edge.sync_mismatch, "completed_goals": server.completed}
    return result


def run_live(cfg: ExperimentConfig, dataset: Dataset) -> RunResult:
    _check(cfg)
    return asyncio.run(_run(cfg, dataset))


__all__ = ["WallScheduler", "run_live"]
