"""ApacheBench- and WebBench-style closed-loop load generators plus reports.

Both generators drive either a ``SimSystem`` (agents are simulated on its
engine) or a live client exposing ``fetch(source, app_id)`` (agents are real
threads).
"""
from __future__ import annotations

import csv
import io
import json
import math
import statistics
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

from .simnet import RETRY_DELAY, EventKind, SimSystem


class SystemUnavailable(Exception):
    """No request completed."""


class MixedSpecs(Exception):
    pass


@dataclass
class AbSpec:
    n_requests: int = 200
    concurrency: int = 100
    repeats: int = 30
    app_id: str = "AP1"

    def __post_init__(self):
        if not (self.n_requests >= self.concurrency >= 1) or self.repeats < 1:
            raise ValueError("need n_requests >= concurrency >= 1 and repeats >= 1")


@dataclass
class DurationSpec:
    agents: int = 100
    duration: float = 300.0
    ramp_up: float = 0.0
    think_time: float = 0.0
    app_id: str = "AP1"
    repeats: int = 1

    def __post_init__(self):
        if self.agents < 1 or self.duration <= 0 or self.ramp_up < 0 or self.think_time < 0:
            raise ValueError("invalid duration workload")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")


@dataclass
class RunReport:
    kind: str
    app_id: str
    spec: dict
    total_time: float = 0.0
    resp_time: float = 0.0
    avg_resp_time: float = 0.0
    total_requests: int = 0
    throughput: int = 0
    failures: int = 0
    issued: int = 0
    discarded: int = 0
    mean_latency: float = 0.0
    p50_latency: float = 0.0
    p95_latency: float = 0.0
    max_in_flight: int = 0
    client_bytes: int = 0
    repeats: int = 1
    backend_hits: Dict[str, int] = field(default_factory=dict)
    balancers: List[dict] = field(default_factory=list)
    self_check: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(**d)


def pages_per_minute(total_requests: int, duration: float) -> int:
    # integer path where possible so 721 over 300 s gives exactly 144
    if float(duration).is_integer():
        return (total_requests * 60) // int(duration)
    return math.floor(total_requests * 60 / duration)


def _source(agent: int) -> str:
    return f"10.0.{agent // 256}.{agent % 256}"


def _latency_stats(latencies: List[float]) -> dict:
    if not latencies:
        return {"mean_latency": 0.0, "p50_latency": 0.0, "p95_latency": 0.0}
    ordered = sorted(latencies)
    p95 = ordered[min(len(ordered) - 1, math.ceil(0.95 * len(ordered)) - 1)]
    return {
        "mean_latency": statistics.fmean(ordered),
        "p50_latency": statistics.median(ordered),
        "p95_latency": p95,
    }


class _Tally:
    """Per-run bookkeeping shared by the sim and live drivers."""

    def __init__(self):
        self.issued = 0
        self.completed = 0
        self.failures = 0
        self.in_flight = 0
        self.max_in_flight = 0
        self.last_completion = 0.0
        self.latencies: List[float] = []
        self.hits: Dict[str, int] = {}
        self.bytes = 0
        # finished only after the duration cutoff
        self.late = 0
        self.lock = threading.Lock()

    def start(self):
        with self.lock:
            self.issued += 1
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)

    def finish(self, ok, issue_t, done_t, backend_id, nbytes, counted=True):
        with self.lock:
            self.in_flight -= 1
            if not counted:
                self.late += 1
                return
            if ok:
                self.completed += 1
                self.latencies.append(done_t - issue_t)
                key = str(backend_id)
                self.hits[key] = self.hits.get(key, 0) + 1
                self.bytes += nbytes
                self.last_completion = max(self.last_completion, done_t)
            else:
                self.failures += 1


def _is_sim(system) -> bool:
    return isinstance(system, SimSystem)


def run_ab(spec: AbSpec, system) -> RunReport:
    """One closed-loop run: ``concurrency`` requests at t=0, each completion
    issues the next until ``n_requests`` have been issued."""
    tally = _Tally()
    if _is_sim(system):
        _ab_sim(spec, system, tally)
        balancers = [lb.snapshot() for lb in system.balancers.values()]
        checks = system.self_check()
    else:
        _ab_live(spec, system, tally)
        balancers = system.snapshot() if hasattr(system, "snapshot") else []
        checks = []
    if tally.completed == 0:
        raise SystemUnavailable(f"{spec.app_id}: no request completed")
    total = tally.last_completion
    resp = total / spec.n_requests
    return RunReport(
        kind="ab",
        app_id=spec.app_id,
        spec={"kind": "ab", "n_requests": spec.n_requests, "concurrency": spec.concurrency, "app_id": spec.app_id},
        total_time=total,
        resp_time=resp,
        avg_resp_time=resp,
        total_requests=tally.completed,
        failures=tally.failures,
        issued=tally.issued,
        max_in_flight=tally.max_in_flight,
        client_bytes=tally.bytes,
        backend_hits=dict(sorted(tally.hits.items(), key=lambda kv: int(kv[0]))),
        balancers=balancers,
        self_check=checks,
        **_latency_stats(tally.latencies),
    )


def _ab_sim(spec: AbSpec, system: SimSystem, tally: _Tally) -> None:
    def issue(agent):
        if tally.issued >= spec.n_requests:
            return
        tally.start()
        system.request(_source(agent), spec.app_id, on_done=lambda rec: done(agent, rec))

    def done(agent, rec):
        tally.finish(rec.ok, rec.issue_time, rec.completion_time, rec.backend_id, rec.bytes)
        issue(agent)

    for agent in range(spec.concurrency):
        issue(agent)
    system.engine.run()


def _ab_live(spec: AbSpec, client, tally: _Tally) -> None:
    t0 = time.monotonic()
    claim = threading.Lock()
    claimed = [0]

    def worker(agent):
        while True:
            with claim:
                if claimed[0] >= spec.n_requests:
                    return
                claimed[0] += 1
            tally.start()
            issue_t = time.monotonic() - t0
            res = client.fetch(_source(agent), spec.app_id)
            tally.finish(res.ok, issue_t, time.monotonic() - t0, res.backend_id, res.nbytes)

    threads = [threading.Thread(target=worker, args=(a,), daemon=True) for a in range(spec.concurrency)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()


def run_duration(spec: DurationSpec, system) -> RunReport:
    """Each agent loops request -> completion -> think time until the cutoff;
    requests still in flight at the cutoff are discarded."""
    tally = _Tally()
    if _is_sim(system):
        _duration_sim(spec, system, tally)
        balancers = [lb.snapshot() for lb in system.balancers.values()]
        checks = system.self_check()
    else:
        _duration_live(spec, system, tally)
        balancers = system.snapshot() if hasattr(system, "snapshot") else []
        checks = []
    if tally.completed == 0:
        raise SystemUnavailable(f"{spec.app_id}: no request completed")
    discarded = tally.in_flight + tally.late
    if tally.issued != tally.completed + tally.failures + discarded:
        checks.append(f"duration accounting: issued {tally.issued} != completed {tally.completed}"
                      f" + failed {tally.failures} + discarded {discarded}")
    return RunReport(
        kind="duration",
        app_id=spec.app_id,
        spec={"kind": "duration", "agents": spec.agents, "duration": spec.duration,
              "ramp_up": spec.ramp_up, "think_time": spec.think_time, "app_id": spec.app_id},
        total_time=spec.duration,
        total_requests=tally.completed,
        throughput=pages_per_minute(tally.completed, spec.duration),
        failures=tally.failures,
        issued=tally.issued,
        discarded=discarded,
        max_in_flight=tally.max_in_flight,
        client_bytes=tally.bytes,
        backend_hits=dict(sorted(tally.hits.items(), key=lambda kv: int(kv[0]))),
        balancers=balancers,
        self_check=checks,
        **_latency_stats(tally.latencies),
    )


def _duration_sim(spec: DurationSpec, system: SimSystem, tally: _Tally) -> None:
    engine = system.engine
    cutoff = spec.duration

    def issue(agent):
        if engine.now >= cutoff:
            return
        tally.start()
        system.request(_source(agent), spec.app_id, on_done=lambda rec: done(agent, rec))

    def done(agent, rec):
        if rec.completion_time > cutoff:
            return
        tally.finish(rec.ok, rec.issue_time, rec.completion_time, rec.backend_id, rec.bytes)
        wait = spec.think_time
        if not rec.ok and rec.completion_time == rec.issue_time:
            wait = max(wait, RETRY_DELAY)
        if wait > 0:
            engine.after(wait, EventKind.TIMER, agent, lambda: issue(agent))
        else:
            issue(agent)

    for agent in range(spec.agents):
        start = agent * spec.ramp_up / spec.agents
        engine.schedule(start, EventKind.TIMER, agent, lambda a=agent: issue(a))
    engine.run_until(cutoff)


def _duration_live(spec: DurationSpec, client, tally: _Tally) -> None:
    t0 = time.monotonic()
    cutoff = spec.duration

    def worker(agent):
        time.sleep(agent * spec.ramp_up / spec.agents)
        while time.monotonic() - t0 < cutoff:
            tally.start()
            issue_t = time.monotonic() - t0
            res = client.fetch(_source(agent), spec.app_id)
            done_t = time.monotonic() - t0
            tally.finish(res.ok, issue_t, done_t, res.backend_id, res.nbytes, counted=done_t <= cutoff)
            if spec.think_time:
                time.sleep(spec.think_time)
            elif not res.ok:
                time.sleep(RETRY_DELAY)

    threads = [threading.Thread(target=worker, args=(a,), daemon=True) for a in range(spec.agents)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()


def aggregate_repeats(reports: List[RunReport]) -> RunReport:
    if not reports:
        raise ValueError("no reports to aggregate")
    first = reports[0]
    for r in reports[1:]:
        if r.spec != first.spec:
            raise MixedSpecs(f"{r.spec} != {first.spec}")
    if len(reports) == 1:
        return first
    n = len(reports)
    hits: Dict[str, int] = {}
    for r in reports:
        for k, v in r.backend_hits.items():
            hits[k] = hits.get(k, 0) + v
    total_requests = round(statistics.fmean(r.total_requests for r in reports))
    total_time = statistics.fmean(r.total_time for r in reports)
    # derived from the mean total so resp_time == total_time / n still holds
    resp = total_time / first.spec["n_requests"] if first.kind == "ab" else 0.0
    out = RunReport(
        kind=first.kind,
        app_id=first.app_id,
        spec=dict(first.spec),
        total_time=total_time,
        resp_time=resp,
        avg_resp_time=resp,
        total_requests=total_requests,
        failures=sum(r.failures for r in reports),
        issued=sum(r.issued for r in reports),
        discarded=sum(r.discarded for r in reports),
        mean_latency=statistics.fmean(r.mean_latency for r in reports),
        p50_latency=statistics.fmean(r.p50_latency for r in reports),
        p95_latency=statistics.fmean(r.p95_latency for r in reports),
        max_in_flight=max(r.max_in_flight for r in reports),
        client_bytes=sum(r.client_bytes for r in reports),
        repeats=sum(r.repeats for r in reports),
        backend_hits=dict(sorted(hits.items(), key=lambda kv: int(kv[0]))),
        balancers=first.balancers,
        self_check=[msg for r in reports for msg in r.self_check],
    )
    if first.kind == "duration":
        out.throughput = pages_per_minute(total_requests, first.spec["duration"])
    return out


# ---------------------------------------------------------------- tables

TABLE3 = "Table3"
TABLE4 = "Table4"

ROW_ORDER = [
    "Round Robin",
    "Weighted Least Connection",
    "Weighted Least Connection + Weighted Least Connection",
    "Weighted Least Connection + Round Robin",
    "Round Robin + Round Robin",
]

COLUMNS = {
    TABLE3: ["Testing Scenarios", "Bandwidth groups", "Load Balancing Algorithm",
             "Total time (secs)", "Resp time (secs/req)", "Avg Resp time (secs/req)"],
    TABLE4: ["Testing Scenarios", "Bandwidth groups", "Load Balancing Algorithm",
             "Total Requests", "Throughput (pages/min)"],
}


@dataclass
class TableRow:
    scenario: str
    bandwidth_groups: List[str]
    algorithm: str
    report: RunReport

    @property
    def levels(self) -> int:
        return self.algorithm.count("+") + 1

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "bandwidth_groups": list(self.bandwidth_groups),
            "algorithm": self.algorithm,
            "report": self.report.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TableRow":
        return cls(d["scenario"], list(d["bandwidth_groups"]), d["algorithm"], RunReport.from_dict(d["report"]))


def algorithm_label(algorithm_labels: List[str]) -> str:
    return " + ".join(algorithm_labels)


def _order_key(indexed_row):
    i, row = indexed_row
    try:
        rank = ROW_ORDER.index(row.algorithm)
    except ValueError:
        rank = len(ROW_ORDER)
    return (row.levels > 1, rank, i)


@dataclass
class TableDocument:
    which: str
    rows: List[TableRow]

    @property
    def columns(self) -> List[str]:
        return COLUMNS[self.which]

    def cells(self, row: TableRow) -> list:
        r = row.report
        head = [row.scenario, "/".join(row.bandwidth_groups), row.algorithm]
        if self.which == TABLE3:
            return head + [f"{r.total_time:.3f}", f"{r.resp_time:.3f}", f"{r.avg_resp_time:.3f}"]
        return head + [str(r.total_requests), f"{r.throughput} pages/min"]

    def to_dict(self) -> dict:
        return {"table": self.which, "columns": self.columns, "rows": [row.to_dict() for row in self.rows]}

    def json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TableDocument":
        d = json.loads(text)
        return cls(d["table"], [TableRow.from_dict(r) for r in d["rows"]])

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow(self.cells(row))
        return buf.getvalue()

    def text(self) -> str:
        table = [self.columns] + [self.cells(row) for row in self.rows]
        widths = [max(len(str(line[i])) for line in table) for i in range(len(self.columns))]
        lines = [f"{self.which}"]
        fmt = "  ".join("{:<%d}" % w for w in widths)
        lines.append(fmt.format(*self.columns))
        lines.append("  ".join("-" * w for w in widths))
        last = None
        for row in self.rows:
            if last is not None and row.scenario != last:
                lines.append("")
            last = row.scenario
            lines.append(fmt.format(*self.cells(row)))
        return "\n".join(lines) + "\n"

    def render(self, fmt: str) -> str:
        if fmt == "json":
            return self.json()
        if fmt == "csv":
            return self.csv()
        if fmt == "text":
            return self.text()
        raise ValueError(f"unknown format {fmt!r}")


def render_table(rows: List[TableRow], which: str) -> TableDocument:
    """Group single-level rows before two-level ones, each in the reference row order."""
    if which not in COLUMNS:
        raise ValueError(which)
    ordered = [row for _, row in sorted(enumerate(rows), key=_order_key)]
    return TableDocument(which, ordered)
