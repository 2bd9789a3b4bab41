"""Level-2 LVS-style balancer: scheduling, connection accounting, health."""
from __future__ import annotations

import enum
import threading
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

from . import model
from .model import Backend, ClusterSpec, Health, SchedulerKind, SchedulerState


class BalancerError(Exception):
    pass


class NoHealthyBackend(BalancerError):
    pass


class Overloaded(BalancerError):
    pass


class UnknownAssignment(BalancerError):
    pass


class Mode(str, enum.Enum):
    DIRECT_ROUTING = "DirectRouting"
    PROXY = "Proxy"


@dataclass
class Request:
    id: int
    app_id: str
    source: str = ""
    size: int = 0  # request bytes; negligible in the simulator


@dataclass
class TrafficCounters:
    requests_in: int = 0
    requests_dispatched: int = 0
    requests_rejected: int = 0
    bytes_request_in: int = 0
    bytes_request_out: int = 0
    bytes_response_out: int = 0
    # backend -> client bytes that bypass the balancer (direct routing)
    bytes_direct_return: int = 0


@dataclass(frozen=True)
class Assignment:
    request_id: int
    backend_id: int
    dispatch_time: float


@dataclass
class HealthProbeConfig:
    interval: float = 1.0
    fail_threshold: int = 3
    rise_threshold: int = 2

    def __post_init__(self):
        if self.interval <= 0 or self.fail_threshold < 1 or self.rise_threshold < 1:
            raise ValueError("probe interval and thresholds must be positive")


@dataclass
class ProbeState:
    ok_streak: int = 0
    fail_streak: int = 0


class BalancerNode:
    """One balancer in front of one cluster.

    ``dispatch``/``complete``/``probe_tick`` share a lock, so a pick and the
    matching connection increment are a single step for concurrent callers.
    """

    def __init__(
        self,
        vip: str,
        kind: SchedulerKind,
        cluster: ClusterSpec,
        forward_capacity: float,
        mode: Mode = Mode.DIRECT_ROUTING,
        probe: Optional[HealthProbeConfig] = None,
    ):
        if forward_capacity <= 0:
            raise ValueError("forward_capacity must be > 0")
        self.vip = vip
        self.kind = SchedulerKind(kind)
        self.state = SchedulerState()
        self.cluster = cluster
        self.forward_capacity = forward_capacity
        self.mode = Mode(mode)
        self.counters = TrafficCounters()
        self.probe = probe or HealthProbeConfig()
        self.probe_states: Dict[int, ProbeState] = {
            b.id: self._initial_probe_state(b) for b in cluster.backends
        }
        self.outstanding: Dict[int, Assignment] = {}
        self.assignments: List[Assignment] = []
        self._pending: set = set()
        self._admitted: deque = deque()
        self._lock = threading.RLock()
        model.refresh_sh_table(self.state, model.healthy_pool(cluster))

    def _initial_probe_state(self, b: Backend) -> ProbeState:
        if b.up:
            return ProbeState(ok_streak=self.probe.rise_threshold)
        return ProbeState(fail_streak=self.probe.fail_threshold)

    @property
    def in_flight(self) -> int:
        return len(self._pending)

    def receive(self, request: Request) -> None:
        with self._lock:
            if request.id in self._pending:
                return
            self._pending.add(request.id)
            self.counters.requests_in += 1
            self.counters.bytes_request_in += request.size

    def admit(self, request: Request, now: float) -> None:
        """Live-mode admission against forward_capacity over a 1 s window."""
        with self._lock:
            self.receive(request)
            while self._admitted and self._admitted[0] <= now - 1.0:
                self._admitted.popleft()
            if len(self._admitted) >= self.forward_capacity:
                self._pending.discard(request.id)
                self.counters.requests_rejected += 1
                raise Overloaded(self.vip)
            self._admitted.append(now)

    def dispatch(self, request: Request, now: float = 0.0) -> Assignment:
        with self._lock:
            self.receive(request)
            self._pending.discard(request.id)
            pool = model.healthy_pool(self.cluster)
            if not pool:
                self.counters.requests_rejected += 1
                raise NoHealthyBackend(self.vip)
            backend_id = model.pick(self.kind, self.state, pool, request.source)
            model.note_connect(self.cluster.backend(backend_id))
            a = Assignment(request.id, backend_id, now)
            self.outstanding[request.id] = a
            self.assignments.append(a)
            self.counters.requests_dispatched += 1
            self.counters.bytes_request_out += request.size
            return a

    def complete(self, assignment: Assignment, response_bytes: Optional[int] = None) -> TrafficCounters:
        with self._lock:
            if self.outstanding.get(assignment.request_id) != assignment:
                raise UnknownAssignment(assignment)
            del self.outstanding[assignment.request_id]
            backend = self.cluster.backend(assignment.backend_id)
            model.note_close(backend)
            if response_bytes is None:
                response_bytes = backend.page_size
            if self.mode is Mode.DIRECT_ROUTING:
                self.counters.bytes_direct_return += response_bytes
            else:
                self.counters.bytes_response_out += response_bytes
            return self.counters

    def abort(self, assignment: Assignment) -> None:
        """Undo a dispatch whose backend could not be reached; counts as rejected."""
        with self._lock:
            if self.outstanding.get(assignment.request_id) != assignment:
                raise UnknownAssignment(assignment)
            del self.outstanding[assignment.request_id]
            model.note_close(self.cluster.backend(assignment.backend_id))
            self.assignments.remove(assignment)
            self.counters.requests_dispatched -= 1
            self.counters.requests_rejected += 1

    def probe_tick(self, results: Dict[int, bool]) -> List[Tuple[int, Health]]:
        with self._lock:
            transitions = []
            for backend_id, ok in sorted(results.items()):
                t = self._apply_probe(backend_id, ok)
                if t is not None:
                    transitions.append(t)
            if transitions:
                pool = model.healthy_pool(self.cluster)
                model.refresh_sh_table(self.state, pool)
                model.clamp_cursors(self.state, len(pool))
            return transitions

    def _apply_probe(self, backend_id: int, ok: bool):
        ps = self.probe_states[backend_id]
        backend = self.cluster.backend(backend_id)
        if ok:
            ps.ok_streak += 1
            ps.fail_streak = 0
            if not backend.up and ps.ok_streak >= self.probe.rise_threshold:
                backend.health = Health.UP
                return backend_id, Health.UP
        else:
            ps.fail_streak += 1
            ps.ok_streak = 0
            if backend.up and ps.fail_streak >= self.probe.fail_threshold:
                backend.health = Health.DOWN
                return backend_id, Health.DOWN
        return None

    def conservation_ok(self) -> bool:
        c = self.counters
        return c.requests_in == c.requests_dispatched + c.requests_rejected + self.in_flight

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "vip": self.vip,
                "algorithm": self.kind.value,
                "mode": self.mode.value,
                **asdict(self.counters),
                "in_flight": self.in_flight,
                "conservation_ok": self.conservation_ok(),
            }
