"""Deterministic discrete-event simulation of the two-level request path.

Time is a float in seconds. Events are ordered by (time, seq), so two events
at the same instant run in the order they were scheduled. Backend links use
equal processor sharing; balancer admission is a FIFO drained at the
balancer's forward capacity. Responses go backend -> client directly.
"""
from __future__ import annotations

import enum
import heapq
import random
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

from .balancer import BalancerNode, NoHealthyBackend, Request
from .model import Health
from .selector import AllSelectorsDown, SelectorNode, UnknownApp, first_up, resolve_app

# flows within this fraction of their size are treated as finished
_DONE_EPS = 1e-9
# agents back off this long after an instantly failing request
RETRY_DELAY = 1e-3


class TimeReversal(Exception):
    pass


class EventKind(str, enum.Enum):
    ARRIVAL = "Arrival"
    RESOLUTION_DONE = "ResolutionDone"
    DISPATCH_DONE = "DispatchDone"
    FLOW_START = "FlowStart"
    TRANSFER_DONE = "TransferDone"
    PROBE_TICK = "ProbeTick"
    FAULT = "Fault"
    TIMER = "Timer"


@dataclass(order=False)
class SimEvent:
    time: float
    seq: int
    kind: EventKind
    payload: object = None
    action: Optional[Callable[[], None]] = field(default=None, repr=False)
    cancelled: bool = False

    def __lt__(self, other: "SimEvent") -> bool:
        return (self.time, self.seq) < (other.time, other.seq)


class Engine:
    def __init__(self):
        self.now = 0.0
        self.seq = 0
        self._queue: List[SimEvent] = []
        self.log: List[tuple] = []

    def schedule(self, time: float, kind: EventKind, payload=None, action=None) -> SimEvent:
        if time < self.now:
            raise TimeReversal(f"event at {time} scheduled at now={self.now}")
        ev = SimEvent(time, self.seq, EventKind(kind), payload, action)
        self.seq += 1
        heapq.heappush(self._queue, ev)
        return ev

    def after(self, delay: float, kind: EventKind, payload=None, action=None) -> SimEvent:
        return self.schedule(self.now + delay, kind, payload, action)

    def pending(self) -> int:
        return sum(1 for ev in self._queue if not ev.cancelled)

    def _step(self) -> None:
        ev = heapq.heappop(self._queue)
        if ev.cancelled:
            return
        self.now = ev.time
        self.log.append((ev.time, ev.seq, ev.kind.value, ev.payload))
        if ev.action is not None:
            ev.action()

    def run_until(self, t_end: float) -> List[tuple]:
        """Process every event with time <= t_end; the clock ends at t_end."""
        start = len(self.log)
        while self._queue and self._queue[0].time <= t_end:
            self._step()
        self.now = max(self.now, t_end)
        return self.log[start:]

    def run(self) -> List[tuple]:
        """Run until the queue is empty."""
        start = len(self.log)
        while self._queue:
            self._step()
        return self.log[start:]


@dataclass
class Flow:
    request_id: int
    total_bytes: float
    remaining_bytes: float
    last_update: float
    on_done: Optional[Callable[["Flow"], None]] = field(default=None, repr=False)
    done_time: Optional[float] = None


class ServerLink:
    """A backend's response link shared equally by its active flows."""

    def __init__(self, capacity: float, name: str = ""):
        if capacity <= 0:
            raise ValueError("capacity must be > 0")
        self.capacity = capacity
        self.name = name
        self.active_flows: List[Flow] = []
        self.last_update = 0.0
        self.bytes_sent = 0.0
        self._next: Optional[SimEvent] = None

    def rate(self) -> float:
        return self.capacity / len(self.active_flows) if self.active_flows else 0.0

    def _advance(self, now: float) -> None:
        if self.active_flows:
            done = self.rate() * (now - self.last_update)
            for f in self.active_flows:
                step = min(done, f.remaining_bytes)
                f.remaining_bytes -= step
                f.last_update = now
                self.bytes_sent += step
        self.last_update = now

    def _reschedule(self, engine: Engine) -> None:
        if self._next is not None:
            self._next.cancelled = True
            self._next = None
        if not self.active_flows:
            return
        first = min(self.active_flows, key=lambda f: f.remaining_bytes)
        eta = engine.now + first.remaining_bytes / self.rate()
        self._next = engine.schedule(eta, EventKind.TRANSFER_DONE, (self.name, first.request_id),
                                     lambda: self._finish(engine))

    def _finish(self, engine: Engine) -> None:
        self._next = None
        self._advance(engine.now)
        done = [f for f in self.active_flows if f.remaining_bytes <= f.total_bytes * _DONE_EPS]
        self.active_flows = [f for f in self.active_flows if f not in done]
        for f in done:
            self.bytes_sent += f.remaining_bytes
            f.remaining_bytes = 0.0
            f.done_time = engine.now
        self._reschedule(engine)
        for f in done:
            if f.on_done is not None:
                f.on_done(f)


def flow_join(engine: Engine, link: ServerLink, flow: Flow) -> None:
    link._advance(engine.now)
    flow.last_update = engine.now
    link.active_flows.append(flow)
    link._reschedule(engine)


def flow_leave(engine: Engine, link: ServerLink, flow: Flow) -> None:
    link._advance(engine.now)
    link.active_flows.remove(flow)
    link._reschedule(engine)


def run_flows(capacity: float, arrivals: List[tuple]) -> List[float]:
    """Completion times for (start_time, bytes) flows on one link."""
    engine = Engine()
    link = ServerLink(capacity)
    flows = []
    for i, (t, size) in enumerate(arrivals):
        f = Flow(i, size, size, t)
        flows.append(f)
        engine.schedule(t, EventKind.FLOW_START, i, lambda f=f: flow_join(engine, link, f))
    engine.run()
    return [f.done_time for f in flows]


@dataclass
class Topology:
    client_selector_s: float = 0.0
    client_balancer_s: float = 0.0
    balancer_backend_s: float = 0.0

    def __post_init__(self):
        if min(self.client_selector_s, self.client_balancer_s, self.balancer_backend_s) < 0:
            raise ValueError("latencies must be >= 0")


@dataclass
class RequestRecord:
    request_id: int
    client: str
    app_id: str
    issue_time: float
    completion_time: Optional[float] = None
    backend_id: Optional[int] = None
    balancer: Optional[str] = None
    selector: Optional[str] = None
    bytes: int = 0
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None and self.completion_time is not None


class SimSystem:
    """Selectors, balancers and backend links wired onto one engine."""

    def __init__(
        self,
        selectors: List[SelectorNode],
        balancers: List[BalancerNode],
        topology: Optional[Topology] = None,
        seed: int = 0,
        page_jitter: float = 0.0,
        resolve_cache: str = "per_request",
    ):
        if resolve_cache not in ("per_request", "per_agent"):
            raise ValueError(f"resolve_cache {resolve_cache!r}")
        self.engine = Engine()
        self.selectors = selectors
        self.balancers: Dict[str, BalancerNode] = {b.vip: b for b in balancers}
        self.topology = topology or Topology()
        self.rng = random.Random(seed)
        self.page_jitter = page_jitter
        self.resolve_cache = resolve_cache
        self.links: Dict[tuple, ServerLink] = {}
        self._admission_free: Dict[str, float] = {vip: 0.0 for vip in self.balancers}
        self._cache: Dict[tuple, str] = {}
        self._next_id = 0
        self.records: List[RequestRecord] = []
        self.client_bytes = 0
        for b in balancers:
            for backend in b.cluster.backends:
                key = (b.cluster.app_id, backend.id)
                if key not in self.links:
                    self.links[key] = ServerLink(backend.capacity, f"{key[0]}/{key[1]}")
        # ground truth the probes observe
        self.alive: Dict[tuple, bool] = {k: True for k in self.links}

    def request(self, client: str, app_id: str, on_done: Optional[Callable[[RequestRecord], None]] = None,
                at: Optional[float] = None) -> RequestRecord:
        """Issue one request; ``on_done`` fires when it completes or fails."""
        rec = RequestRecord(self._next_id, client, app_id, self.engine.now if at is None else at)
        self._next_id += 1
        self.records.append(rec)
        self.engine.schedule(rec.issue_time, EventKind.ARRIVAL, rec.request_id,
                             lambda: self._arrive(rec, on_done))
        return rec

    def _fail(self, rec, on_done, error):
        rec.error = error
        rec.completion_time = self.engine.now
        if on_done is not None:
            on_done(rec)

    def _arrive(self, rec, on_done):
        key = (rec.client, rec.app_id)
        try:
            if self.resolve_cache == "per_agent" and key in self._cache:
                vip = self._cache[key]
            else:
                node = first_up(self.selectors)
                vip = resolve_app(node, rec.app_id)
                rec.selector = node.node_id
                self._cache[key] = vip
        except (AllSelectorsDown, UnknownApp) as exc:
            self._fail(rec, on_done, type(exc).__name__)
            return
        rec.balancer = vip
        delay = self.topology.client_selector_s + self.topology.client_balancer_s
        self.engine.after(delay, EventKind.RESOLUTION_DONE, rec.request_id,
                          lambda: self._at_balancer(rec, on_done))

    def _at_balancer(self, rec, on_done):
        lb = self.balancers[rec.balancer]
        req = Request(rec.request_id, rec.app_id, rec.client)
        lb.receive(req)
        start = max(self.engine.now, self._admission_free[lb.vip])
        done = start + 1.0 / lb.forward_capacity
        self._admission_free[lb.vip] = done
        self.engine.schedule(done, EventKind.DISPATCH_DONE, rec.request_id,
                             lambda: self._dispatch(rec, req, lb, on_done))

    def _dispatch(self, rec, req, lb, on_done):
        try:
            a = lb.dispatch(req, self.engine.now)
        except NoHealthyBackend:
            self._fail(rec, on_done, "NoHealthyBackend")
            return
        rec.backend_id = a.backend_id
        backend = lb.cluster.backend(a.backend_id)
        size = backend.page_size
        if self.page_jitter:
            size = max(1, round(size * (1.0 + self.rng.uniform(-self.page_jitter, self.page_jitter))))
        link = self.links[(lb.cluster.app_id, a.backend_id)]

        def finished(flow):
            lb.complete(a, size)
            rec.bytes = size
            rec.completion_time = self.engine.now
            self.client_bytes += size
            if on_done is not None:
                on_done(rec)

        def start():
            flow_join(self.engine, link, Flow(rec.request_id, size, size, self.engine.now, finished))

        if self.topology.balancer_backend_s > 0:
            self.engine.after(self.topology.balancer_backend_s, EventKind.FLOW_START, rec.request_id, start)
        else:
            start()

    def set_selector_health(self, t: float, node_id: str, health: Health) -> None:
        node = next(n for n in self.selectors if n.node_id == node_id)

        def apply():
            node.health = Health(health)

        self.engine.schedule(t, EventKind.FAULT, (node_id, Health(health).value), apply)

    def set_backend_alive(self, t: float, app_id: str, backend_id: int, alive: bool) -> None:
        """Schedule a ground-truth backend failure/recovery seen by probes."""

        def apply():
            self.alive[(app_id, backend_id)] = alive

        self.engine.schedule(t, EventKind.FAULT, (f"{app_id}/{backend_id}", alive), apply)

    def start_probes(self, until: float) -> None:
        """Probe every balancer's pool each interval up to ``until``."""
        for lb in self.balancers.values():
            def tick(lb=lb):
                results = {b.id: self.alive[(lb.cluster.app_id, b.id)] for b in lb.cluster.backends}
                lb.probe_tick(results)
                nxt = self.engine.now + lb.probe.interval
                if nxt <= until:
                    self.engine.schedule(nxt, EventKind.PROBE_TICK, lb.vip, tick)

            self.engine.schedule(self.engine.now + lb.probe.interval, EventKind.PROBE_TICK, lb.vip, tick)

    def self_check(self) -> List[str]:
        """Conservation and direct-routing accounting; returns violations."""
        problems = []
        completed = sum(r.bytes for r in self.records if r.ok)
        if completed != self.client_bytes:
            problems.append(f"client bytes {self.client_bytes} != completed page bytes {completed}")
        for lb in self.balancers.values():
            if not lb.conservation_ok():
                problems.append(f"{lb.vip}: request counters do not balance")
            if lb.mode.value == "DirectRouting" and lb.counters.bytes_response_out != 0:
                problems.append(f"{lb.vip}: response bytes crossed a direct-routing balancer")
        return problems


def simulate_request_path(system: SimSystem, client: str, app_id: str) -> RequestRecord:
    """Issue a single request now and run the engine until it settles."""
    rec = system.request(client, app_id)
    system.engine.run()
    return rec
