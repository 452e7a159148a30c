"""Link emulation on a deterministic virtual-time event scheduler.

Delays are sampled per message from the profile's distribution. Links never
reorder: a message is delivered no earlier than its predecessor, plus its
serialization time when a bandwidth cap is set.
"""

from __future__ import annotations

import heapq
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from e5sh.core import Clock

logger = logging.getLogger(__name__)

NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000


@dataclass(frozen=True)
class DelayDist:
    """One-way delay distribution in milliseconds.

    ``kind`` is ``constant`` (params: ms), ``normal`` (mean, std; floored at
    0) or ``lognormal`` (mu, sigma of ln-ms).
    """

    kind: str
    params: tuple

    def __post_init__(self):
        kind = self.kind.lower()
        n = {"constant": 1, "normal": 2, "lognormal": 2}.get(kind)
        if n is None:
            raise ValueError(f"unknown delay kind {self.kind!r}")
        if len(self.params) != n:
            raise ValueError(f"{kind} delay takes {n} parameter(s)")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))

    @classmethod
    def constant(cls, ms):
        return cls("constant", (ms,))

    @classmethod
    def normal(cls, mean, std):
        return cls("normal", (mean, std))

    @classmethod
    def lognormal(cls, mu, sigma):
        return cls("lognormal", (mu, sigma))

    def sample_ms(self, rng: np.random.Generator) -> float:
        if self.kind == "constant":
            return max(0.0, self.params[0])
        if self.kind == "normal":
            return max(0.0, rng.normal(self.params[0], self.params[1]))
        return float(rng.lognormal(self.params[0], self.params[1]))

    def mean_ms(self) -> float:
        # normal floor at 0 is ignored; negligible for the shipped profiles
        if self.kind == "constant":
            return max(0.0, self.params[0])
        if self.kind == "normal":
            return self.params[0]
        mu, sigma = self.params
        return math.exp(mu + sigma * sigma / 2.0)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": list(self.params)}


@dataclass(frozen=True)
class NetworkProfile:
    name: str
    delay: DelayDist
    bandwidth_kBps: float | None = None  # None == unlimited
    loss: float = 0.0
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.loss <= 1.0:
            raise ValueError("loss probability must lie in [0, 1]")
        if self.bandwidth_kBps is not None and self.bandwidth_kBps <= 0:
            raise ValueError("bandwidth cap must be positive")

    def with_(self, **changes) -> "NetworkProfile":
        d = {**self.__dict__, **changes}
        return NetworkProfile(**d)

    def to_dict(self) -> dict:
        return {"name": self.name, "delay": self.delay.to_dict(),
                "bandwidth_kbps": self.bandwidth_kBps, "loss": self.loss,
                "seed": self.seed, "metadata": dict(self.metadata)}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkProfile":
        delay = d["delay"]
        return cls(name=d["name"], delay=DelayDist(delay["kind"], tuple(delay["params"])),
                   bandwidth_kBps=d.get("bandwidth_kbps"), loss=float(d.get("loss", 0.0)),
                   seed=int(d.get("seed", 0)), metadata=dict(d.get("metadata", {})))

    @classmethod
    def from_json(cls, text: str) -> "NetworkProfile":
        return cls.from_dict(json.loads(text))


# Radio parameters of the private 5G SA cell; descriptive only.
FIVE_G_CELL = {
    "band": "N77 3800-4100 MHz",
    "carrier_bandwidth": "100 MHz",
    "modulation": "256QAM DL / 64QAM UL",
    "transmit_power": "5 W per Tx path (4 paths)",
    "mimo": "4x2 closed-loop",
    "tdd_ul_dl": "3/7",
}

PROFILES = {
    "5g": NetworkProfile("5g", DelayDist.normal(4.0, 1.0), None, 0.001, 5, FIVE_G_CELL),
    "wifi": NetworkProfile("wifi", DelayDist.lognormal(math.log(8.0), 0.8), None, 0.01, 11),
    "ideal": NetworkProfile("ideal", DelayDist.constant(0.0), None, 0.0, 0),
}


def get_profile(name_or_dict) -> NetworkProfile:
    if isinstance(name_or_dict, NetworkProfile):
        return name_or_dict
    if isinstance(name_or_dict, dict):
        return NetworkProfile.from_dict(name_or_dict)
    try:
        return PROFILES[name_or_dict]
    except KeyError:
        raise ValueError(f"unknown network profile {name_or_dict!r}") from None


@dataclass(order=True)
class Event:
    due: int
    seq: int
    callback: Callable = field(compare=False)
    args: tuple = field(compare=False, default=())
    label: str = field(compare=False, default="")
    cancelled: bool = field(compare=False, default=False)

    def cancel(self):
        self.cancelled = True


class EventScheduler:
    """Priority queue of callbacks ordered by (due time, submission order)."""

    def __init__(self, clock: Clock | None = None):
        self.clock = clock or Clock(Clock.VIRTUAL)
        if self.clock.mode != Clock.VIRTUAL:
            raise ValueError("the scheduler drives a virtual clock")
        self._queue: list[Event] = []
        self._seq = 0

    @property
    def now(self) -> int:
        return self.clock.now()

    def pending(self) -> int:
        return sum(1 for e in self._queue if not e.cancelled)

    def call_at(self, due: int, callback: Callable, *args, label: str = "") -> Event:
        due = int(due)
        if due < self.now:
            raise ValueError("cannot schedule in the past")
        ev = Event(due, self._seq, callback, args, label)
        self._seq += 1
        heapq.heappush(self._queue, ev)
        return ev

    def call_later(self, delay: int, callback: Callable, *args, label: str = "") -> Event:
        return self.call_at(self.now + int(delay), callback, *args, label=label)

    def _fire_next(self) -> Event:
        ev = heapq.heappop(self._queue)
        self.clock._set(ev.due)
        ev.callback(*ev.args)
        return ev

    def advance(self, until: int) -> list[Event]:
        """Fire every event due at or before ``until``; the clock ends there."""
        if until < self.now:
            raise ValueError("until is in the past")
        fired = []
        while self._queue and self._queue[0].due <= until:
            if self._queue[0].cancelled:
                heapq.heappop(self._queue)
                continue
            fired.append(self._fire_next())
        self.clock._set(until)
        return fired

    def run(self, until: int | None = None, stop: Callable[[], bool] | None = None,
            max_events: int = 50_000_000) -> int:
        """Fire events until the queue drains, ``stop()`` is true or ``until``."""
        n = 0
        while self._queue:
            if stop is not None and stop():
                break
            head = self._queue[0]
            if head.cancelled:
                heapq.heappop(self._queue)
                continue
            if until is not None and head.due > until:
                break
            self._fire_next()
            n += 1
            if n >= max_events:
                raise RuntimeError("event budget exhausted")
        if until is not None and self.now < until and (stop is None or not stop()):
            self.clock._set(until)
        return n


def link_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), int(stream)]))


class Link:
    """One direction of an emulated link.

    ``reliable=True`` models a retransmitting stream (TCP): losses never
    drop the message, each one adds ``rto_ns`` before delivery instead.
    """

    def __init__(self, profile: NetworkProfile, scheduler: EventScheduler,
                 rng: np.random.Generator | None = None, name: str = "",
                 reliable: bool = False, rto_ns: int = 200 * NS_PER_MS):
        self.profile = profile
        self.scheduler = scheduler
        self.rng = rng if rng is not None else link_rng(profile.seed, 0)
        self.name = name or profile.name
        self.reliable = reliable
        self.rto_ns = int(rto_ns)
        self.sent = 0
        self.delivered = 0
        self.dropped = 0
        self.retransmits = 0
        self.bytes = 0
        self.bytes_delivered = 0
        self.tagged_bytes: dict[Any, int] = {}
        self._last_delivery = 0
        self.deliveries: list[tuple[int, int]] | None = None  # (t, nbytes) when tracing

    @property
    def in_queue(self) -> int:
        return self.sent - self.delivered - self.dropped

    def trace(self):
        self.deliveries = []
        return self

    def transmission_ns(self, nbytes: int) -> int:
        cap = self.profile.bandwidth_kBps
        if cap is None:
            return 0
        return int(round(nbytes / (cap * 1000.0) * NS_PER_S))

    def send(self, data, deliver: Callable[[Any], None], now: int | None = None,
             nbytes: int | None = None, tag: Any = None) -> int | None:
        """Schedule ``deliver(data)``; return the delivery time, or None if lost.

        ``nbytes`` overrides the accounted size (for modelled payload sizes).
        """
        now = self.scheduler.now if now is None else int(now)
        size = len(data) if nbytes is None else int(nbytes)
        self.sent += 1
        self.bytes += size
        if tag is not None:
            self.tagged_bytes[tag] = self.tagged_bytes.get(tag, 0) + size
        loss = self.profile.loss
        extra = 0
        if loss > 0.0:
            if self.reliable:
                k = 0
                while k < 64 and self.rng.random() < loss:
                    k += 1
                self.retransmits += k
                extra = k * self.rto_ns
            elif self.rng.random() < loss:
                self.dropped += 1
                return None
        delay = int(round(self.profile.delay.sample_ms(self.rng) * NS_PER_MS))
        t = max(now + extra + delay, self._last_delivery) + self.transmission_ns(size)
        self._last_delivery = t
        self.scheduler.call_at(t, self._deliver, data, deliver, size, label=self.name)
        return t

    def _deliver(self, data, deliver, size):
        self.delivered += 1
        self.bytes_delivered += size
        if self.deliveries is not None:
            self.deliveries.append((self.scheduler.now, size))
        deliver(data)

    def stats(self) -> dict:
        return {"sent": self.sent, "delivered": self.delivered, "dropped": self.dropped,
                "in_queue": self.in_queue, "bytes": self.bytes,
                "retransmits": self.retransmits}


class LinkPair:
    """Uplink and downlink between two endpoints, independently seeded."""

    def __init__(self, profile: NetworkProfile, scheduler: EventScheduler, stream: int = 0,
                 reliable: bool = False, name: str = "", seed: int | None = None):
        seed = profile.seed if seed is None else seed
        self.up = Link(profile, scheduler, link_rng(seed, 2 * stream), f"{name}up",
                       reliable=reliable)
        self.down = Link(profile, scheduler, link_rng(seed, 2 * stream + 1), f"{name}down",
                         reliable=reliable)


def rtt_probe(up: Link, down: Link, n: int, timeout_ns: int = NS_PER_S,
              probe_bytes: int = 64) -> list[float | None]:
    """Run ``n`` sequential echo exchanges; returns RTTs in ms, None on timeout."""
    if n < 1:
        raise ValueError("n must be >= 1")
    sched = up.scheduler
    samples: list[float | None] = []
    state = {"i": 0, "t0": 0, "done": False, "timer": None}

    def start():
        if state["i"] >= n:
            return
        state["done"] = False
        state["t0"] = sched.now
        state["timer"] = sched.call_later(timeout_ns, on_timeout, state["i"])
        up.send(state["i"], on_probe, nbytes=probe_bytes)

    def on_probe(i):
        down.send(i, on_echo, nbytes=probe_bytes)

    def on_echo(i):
        if state["done"] or i != state["i"]:
            return
        state["done"] = True
        state["timer"].cancel()
        samples.append((sched.now - state["t0"]) / NS_PER_MS)
        state["i"] += 1
        start()

    def on_timeout(i):
        if state["done"] or i != state["i"]:
            return
        state["done"] = True
        samples.append(None)
        state["i"] += 1
        start()

    start()
    sched.run(stop=lambda: len(samples) >= n)
    return samples
