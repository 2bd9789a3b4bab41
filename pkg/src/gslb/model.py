"""Clusters, backends and the five connection schedulers.

The scheduler functions are plain functions over a ``SchedulerState`` and a
healthy pool, so the balancer, the simulator and the live proxy all share the
exact same pick sequence.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from math import gcd
from typing import List, Optional

SH_BUCKETS = 256

# 32-bit FNV-1a
FNV_OFFSET = 2166136261
FNV_PRIME = 16777619


class EmptyPool(Exception):
    """No healthy backend to pick from."""


class UnderflowClose(Exception):
    """A connection was closed on a backend with zero active connections."""


class Health(str, enum.Enum):
    UP = "Up"
    DOWN = "Down"


class SchedulerKind(str, enum.Enum):
    ROUND_ROBIN = "RoundRobin"
    WEIGHTED_ROUND_ROBIN = "WeightedRoundRobin"
    LEAST_CONNECTION = "LeastConnection"
    WEIGHTED_LEAST_CONNECTION = "WeightedLeastConnection"
    SOURCE_HASH = "SourceHash"

    @property
    def label(self) -> str:
        return _LABELS[self]

    @classmethod
    def parse(cls, name: str) -> "SchedulerKind":
        """Accept the enum value, the member name, or the short/long table label."""
        key = name.strip().lower().replace("_", "").replace("-", "").replace(" ", "")
        for kind in cls:
            names = {kind.value, kind.name, kind.label, _SHORT[kind]}
            if key in {n.lower().replace("_", "").replace(" ", "") for n in names}:
                return kind
        raise ValueError(f"unknown scheduler {name!r}")


_LABELS = {
    SchedulerKind.ROUND_ROBIN: "Round Robin",
    SchedulerKind.WEIGHTED_ROUND_ROBIN: "Weighted Round Robin",
    SchedulerKind.LEAST_CONNECTION: "Least Connection",
    SchedulerKind.WEIGHTED_LEAST_CONNECTION: "Weighted Least Connection",
    SchedulerKind.SOURCE_HASH: "Source Hash",
}

_SHORT = {
    SchedulerKind.ROUND_ROBIN: "rr",
    SchedulerKind.WEIGHTED_ROUND_ROBIN: "wrr",
    SchedulerKind.LEAST_CONNECTION: "lc",
    SchedulerKind.WEIGHTED_LEAST_CONNECTION: "wlc",
    SchedulerKind.SOURCE_HASH: "sh",
}


@dataclass
class Backend:
    id: int
    address: str = ""
    weight: int = 1
    capacity: float = 1.0  # bytes/s
    page_size: int = 1
    health: Health = Health.UP
    active_conns: int = 0

    def __post_init__(self):
        if self.weight < 1:
            raise ValueError(f"backend {self.id}: weight must be >= 1")
        if self.capacity <= 0:
            raise ValueError(f"backend {self.id}: capacity must be > 0")
        if self.page_size <= 0:
            raise ValueError(f"backend {self.id}: page_size must be > 0")
        if self.active_conns < 0:
            raise ValueError(f"backend {self.id}: active_conns must be >= 0")

    @property
    def up(self) -> bool:
        return self.health is Health.UP


@dataclass
class ClusterSpec:
    app_id: str
    backends: List[Backend]

    def __post_init__(self):
        if not self.backends:
            raise ValueError(f"cluster {self.app_id}: empty backend list")
        self.backends = sorted(self.backends, key=lambda b: b.id)
        ids = [b.id for b in self.backends]
        if len(set(ids)) != len(ids):
            raise ValueError(f"cluster {self.app_id}: duplicate backend ids")

    def backend(self, backend_id: int) -> Backend:
        for b in self.backends:
            if b.id == backend_id:
                return b
        raise KeyError(backend_id)


@dataclass
class SchedulerState:
    rr_cursor: int = 0
    wrr_index: int = -1
    wrr_current_weight: int = 0
    sh_table: List[int] = field(default_factory=list)
    table_version: int = 0
    # healthy ids the table was built for
    sh_members: tuple = ()


def healthy_pool(cluster: ClusterSpec) -> List[Backend]:
    return [b for b in cluster.backends if b.up]


def _check(pool):
    if not pool:
        raise EmptyPool("no healthy backend")


def pick_round_robin(state: SchedulerState, pool: List[Backend]) -> int:
    _check(pool)
    if state.rr_cursor >= len(pool):
        state.rr_cursor %= len(pool)
    chosen = pool[state.rr_cursor]
    state.rr_cursor = (state.rr_cursor + 1) % len(pool)
    return chosen.id


def pick_weighted_round_robin(state: SchedulerState, pool: List[Backend]) -> int:
    """Classic current-weight scan: step the index, lower the bar by the gcd
    of the weights on every wrap, and take the first backend that clears it."""
    _check(pool)
    n = len(pool)
    weights = [b.weight for b in pool]
    step = 0
    for w in weights:
        step = gcd(step, w)
    top = max(weights)
    if state.wrr_index >= n:
        state.wrr_index %= n
    while True:
        state.wrr_index = (state.wrr_index + 1) % n
        if state.wrr_index == 0:
            state.wrr_current_weight -= step
            if state.wrr_current_weight <= 0:
                state.wrr_current_weight = top
        if weights[state.wrr_index] >= state.wrr_current_weight:
            return pool[state.wrr_index].id


def pick_least_connection(pool: List[Backend]) -> int:
    _check(pool)
    best = pool[0]
    for b in pool[1:]:
        if b.active_conns < best.active_conns or (
            b.active_conns == best.active_conns and b.id < best.id
        ):
            best = b
    return best.id


def pick_weighted_least_connection(pool: List[Backend]) -> int:
    _check(pool)
    best = pool[0]
    for b in pool[1:]:
        # b.conns/b.weight vs best.conns/best.weight without dividing
        lhs = b.active_conns * best.weight
        rhs = best.active_conns * b.weight
        if lhs < rhs or (lhs == rhs and b.id < best.id):
            best = b
    return best.id


def fnv1a_32(text: str) -> int:
    h = FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFF
    return h


def source_bucket(source: str) -> int:
    return fnv1a_32(source) % SH_BUCKETS


def _weighted_cycle(pool: List[Backend]) -> List[int]:
    cycle = []
    for b in pool:
        cycle.extend([b.id] * b.weight)
    return cycle


def build_sh_table(pool: List[Backend], previous: Optional[List[int]] = None) -> List[int]:
    """Fill the 256-bucket table.

    Without a previous table, bucket ``i`` goes to the ``i``-th entry of the
    weight-expanded id cycle. With one, buckets whose owner is still in the
    pool keep it; orphaned buckets are dealt round-robin over the cycle, and
    newcomers take buckets from over-quota owners until they reach the quota
    a fresh fill would give them.
    """
    if not pool:
        return []
    cycle = _weighted_cycle(pool)
    fresh = [cycle[i % len(cycle)] for i in range(SH_BUCKETS)]
    if not previous:
        return fresh

    live = {b.id for b in pool}
    table = list(previous)
    orphans = [i for i, owner in enumerate(table) if owner not in live]
    for k, i in enumerate(orphans):
        table[i] = cycle[k % len(cycle)]

    quota = {b.id: fresh.count(b.id) for b in pool}
    counts = {b.id: table.count(b.id) for b in pool}
    for b in pool:
        if counts[b.id] > 0:
            continue
        need = quota[b.id]
        for i, owner in enumerate(table):
            if need == 0:
                break
            if counts[owner] > quota[owner]:
                counts[owner] -= 1
                table[i] = b.id
                need -= 1
        counts[b.id] = quota[b.id] - need
    return table


def refresh_sh_table(state: SchedulerState, pool: List[Backend]) -> bool:
    """Rebuild the table if the healthy set changed; return True if it did."""
    members = tuple(b.id for b in pool)
    if members == state.sh_members and (state.sh_table or not pool):
        return False
    state.sh_table = build_sh_table(pool, state.sh_table or None)
    state.sh_members = members
    state.table_version += 1
    return True


def pick_source_hash(state: SchedulerState, source: str, pool: List[Backend]) -> int:
    _check(pool)
    refresh_sh_table(state, pool)
    return state.sh_table[source_bucket(source)]


def pick(kind: SchedulerKind, state: SchedulerState, pool: List[Backend], source: str = "") -> int:
    if kind is SchedulerKind.ROUND_ROBIN:
        return pick_round_robin(state, pool)
    if kind is SchedulerKind.WEIGHTED_ROUND_ROBIN:
        return pick_weighted_round_robin(state, pool)
    if kind is SchedulerKind.LEAST_CONNECTION:
        return pick_least_connection(pool)
    if kind is SchedulerKind.WEIGHTED_LEAST_CONNECTION:
        return pick_weighted_least_connection(pool)
    if kind is SchedulerKind.SOURCE_HASH:
        return pick_source_hash(state, source, pool)
    raise ValueError(kind)


def clamp_cursors(state: SchedulerState, pool_size: int) -> None:
    if pool_size == 0:
        return
    state.rr_cursor %= pool_size
    if state.wrr_index >= pool_size:
        state.wrr_index %= pool_size


def note_connect(backend: Backend) -> Backend:
    backend.active_conns += 1
    return backend


def note_close(backend: Backend) -> Backend:
    if backend.active_conns < 1:
        raise UnderflowClose(f"backend {backend.id} has no open connection")
    backend.active_conns -= 1
    return backend
