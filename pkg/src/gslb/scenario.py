"""Scenario files: YAML documents validated against a fixed schema."""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import List, Optional

import jsonschema
import yaml

from .balancer import BalancerNode, HealthProbeConfig, Mode
from .bench import AbSpec, DurationSpec, algorithm_label
from .model import Backend, ClusterSpec, SchedulerKind
from .selector import make_pair, register_balancer
from .simnet import SimSystem, Topology

_nonneg = {"type": "number", "minimum": 0}
_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["apps", "selectors", "workload"],
    "properties": {
        "seed": {"type": "integer"},
        "mode": {"enum": ["sim", "live"]},
        "apps": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["app_id", "backends", "balancers"],
                "properties": {
                    "app_id": {"type": "string", "minLength": 1},
                    "backends": {
                        "type": "array",
                        "minItems": 1,
                        "items": {
                            "type": "object",
                            "additionalProperties": False,
                            "required": ["id", "capacity_bytes_per_s", "page_size_bytes"],
                            "properties": {
                                "id": {"type": "integer", "minimum": 0},
                                "capacity_bytes_per_s": _pos,
                                "page_size_bytes": _posint,
                                "weight": _posint,
                            },
                        },
                    },
                    "balancers": {
                        "type": "array",
                        "minItems": 1,
                        "items": {
                            "type": "object",
                            "additionalProperties": False,
                            "required": ["vip", "algorithm", "forward_capacity_rps"],
                            "properties": {
                                "vip": {"type": "string", "minLength": 1},
                                "algorithm": {"enum": [k.value for k in SchedulerKind]},
                                "forward_capacity_rps": _pos,
                            },
                        },
                    },
                },
            },
        },
        "selectors": {
            "type": "object",
            "additionalProperties": False,
            "required": ["master"],
            "properties": {
                "master": {"type": "string", "minLength": 1},
                "slave": {"type": "string", "minLength": 1},
                "resolve_cache": {"enum": ["per_agent", "per_request"]},
            },
        },
        "latencies": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "client_selector_s": _nonneg,
                "client_balancer_s": _nonneg,
                "balancer_backend_s": _nonneg,
            },
        },
        "workload": {
            "type": "object",
            "required": ["kind"],
            "oneOf": [
                {
                    "additionalProperties": False,
                    "required": ["kind", "n_requests", "concurrency"],
                    "properties": {
                        "kind": {"const": "ab"},
                        "n_requests": _posint,
                        "concurrency": _posint,
                        "repeats": _posint,
                    },
                },
                {
                    "additionalProperties": False,
                    "required": ["kind", "agents", "duration_s"],
                    "properties": {
                        "kind": {"const": "duration"},
                        "agents": _posint,
                        "duration_s": _pos,
                        "ramp_up_s": _nonneg,
                        "think_time_s": _nonneg,
                        "repeats": _posint,
                    },
                },
            ],
        },
        "ports": {
            "type": "object",
            "additionalProperties": False,
            "required": ["backend_base"],
            "properties": {
                "host": {"type": "string"},
                "backend_base": {"type": "integer", "minimum": 1, "maximum": 65535},
                "control": {"type": "integer", "minimum": 1, "maximum": 65535},
            },
        },
    },
}


class SchemaError(Exception):
    def __init__(self, errors: List[str]):
        self.errors = errors
        super().__init__("; ".join(errors))


@dataclass
class BackendSpec:
    id: int
    capacity: float
    page_size: int
    weight: int = 1


@dataclass
class BalancerSpec:
    vip: str
    algorithm: SchedulerKind
    forward_capacity: float


@dataclass
class AppSpec:
    app_id: str
    backends: List[BackendSpec]
    balancers: List[BalancerSpec]

    @property
    def algorithm(self) -> str:
        return algorithm_label([b.algorithm.label for b in self.balancers])

    @property
    def bandwidth_groups(self) -> List[str]:
        return [str(int(b.capacity)) if b.capacity.is_integer() else f"{b.capacity}" for b in self.backends]


@dataclass
class ScenarioFile:
    apps: List[AppSpec]
    master: str
    slave: Optional[str]
    workload: dict
    seed: int = 0
    mode: str = "sim"
    resolve_cache: str = "per_request"
    topology: Topology = field(default_factory=Topology)
    ports: Optional[dict] = None
    source: str = ""

    def app(self, app_id: str) -> AppSpec:
        for a in self.apps:
            if a.app_id == app_id:
                return a
        raise KeyError(app_id)

    def workload_spec(self, app_id: str):
        w = self.workload
        if w["kind"] == "ab":
            return AbSpec(w["n_requests"], w["concurrency"], w.get("repeats", 1), app_id)
        return DurationSpec(w["agents"], float(w["duration_s"]), float(w.get("ramp_up_s", 0.0)),
                            float(w.get("think_time_s", 0.0)), app_id, w.get("repeats", 1))

    @property
    def host(self) -> str:
        return (self.ports or {}).get("host", "127.0.0.1")

    def backend_addresses(self) -> dict:
        """(app_id, backend id) -> host:port, numbered from ports.backend_base."""
        base = (self.ports or {}).get("backend_base", 0)
        out = {}
        k = 0
        for a in self.apps:
            for b in a.backends:
                out[(a.app_id, b.id)] = f"{self.host}:{base + k}"
                k += 1
        return out


def _path_of(err) -> str:
    out = ""
    for part in err.absolute_path:
        out += f"[{part}]" if isinstance(part, int) else (f".{part}" if out else str(part))
    return out or "<root>"


def validate(doc) -> List[str]:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = []
    for err in sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path))):
        if err.validator == "oneOf" and isinstance(err.instance, dict):
            # name the offending key rather than the whole branch list
            best = jsonschema.exceptions.best_match(err.context) if err.context else err
            errors.append(f"{_path_of(err)}: {best.message}")
        else:
            errors.append(f"{_path_of(err)}: {err.message}")
    if errors:
        return errors
    vips = set()
    for i, app in enumerate(doc["apps"]):
        ids = [b["id"] for b in app["backends"]]
        if len(set(ids)) != len(ids):
            errors.append(f"apps[{i}].backends: duplicate backend id")
        for j, lb in enumerate(app["balancers"]):
            if lb["vip"] in vips:
                errors.append(f"apps[{i}].balancers[{j}].vip: duplicate vip {lb['vip']!r}")
            vips.add(lb["vip"])
    app_ids = [a["app_id"] for a in doc["apps"]]
    if len(set(app_ids)) != len(app_ids):
        errors.append("apps: duplicate app_id")
    w = doc["workload"]
    if w["kind"] == "ab" and w["n_requests"] < w["concurrency"]:
        errors.append("workload.n_requests: must be >= concurrency")
    if doc.get("mode") == "live":
        if "ports" not in doc:
            errors.append("ports: required in live mode")
        addrs = list(vips) + [doc["selectors"]["master"]]
        if "slave" in doc["selectors"]:
            addrs.append(doc["selectors"]["slave"])
        for a in addrs:
            if not _is_hostport(a):
                errors.append(f"{a!r}: live addresses must be host:port")
    return errors


def _is_hostport(text: str) -> bool:
    host, _, port = text.rpartition(":")
    return bool(host) and port.isdigit() and 0 < int(port) < 65536


def load_scenario(doc: dict, source: str = "") -> ScenarioFile:
    errors = validate(doc)
    if errors:
        raise SchemaError(errors)
    apps = []
    for a in doc["apps"]:
        backends = [BackendSpec(b["id"], float(b["capacity_bytes_per_s"]), b["page_size_bytes"], b.get("weight", 1))
                    for b in sorted(a["backends"], key=lambda b: b["id"])]
        balancers = [BalancerSpec(lb["vip"], SchedulerKind(lb["algorithm"]), float(lb["forward_capacity_rps"]))
                     for lb in a["balancers"]]
        apps.append(AppSpec(a["app_id"], backends, balancers))
    sel = doc["selectors"]
    return ScenarioFile(
        apps=apps,
        master=sel["master"],
        slave=sel.get("slave"),
        workload=dict(doc["workload"]),
        seed=doc.get("seed", 0),
        mode=doc.get("mode", "sim"),
        resolve_cache=sel.get("resolve_cache", "per_request"),
        topology=Topology(**doc.get("latencies", {})),
        ports=doc.get("ports"),
        source=source,
    )


def packaged_scenarios() -> List[str]:
    root = resources.files("gslb") / "scenarios"
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".scenario"))


def locate(path) -> Path:
    """A path on disk, or the name of a scenario shipped with the package."""
    p = Path(path)
    if p.exists():
        return p
    shipped = resources.files("gslb") / "scenarios" / p.name
    if shipped.is_file():
        return Path(str(shipped))
    raise FileNotFoundError(path)


def parse_scenario(path) -> ScenarioFile:
    p = locate(path)
    try:
        doc = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise SchemaError([f"<root>: not a valid YAML document ({exc})"]) from None
    if not isinstance(doc, dict):
        raise SchemaError(["<root>: expected a mapping"])
    return load_scenario(doc, str(p))


# ------------------------------------------------------------ system builders

def build_cluster(app: AppSpec, addresses: Optional[dict] = None) -> ClusterSpec:
    addresses = addresses or {}
    return ClusterSpec(app.app_id, [
        Backend(b.id, addresses.get((app.app_id, b.id), ""), b.weight, b.capacity, b.page_size)
        for b in app.backends
    ])


def build_selectors(scn: ScenarioFile):
    nodes = make_pair(scn.master, scn.slave)
    for app in scn.apps:
        for lb in app.balancers:
            register_balancer(nodes[0], app.app_id, lb.vip)
    return nodes


def build_balancers(scn: ScenarioFile, mode: Mode, probe: Optional[HealthProbeConfig] = None,
                    addresses: Optional[dict] = None) -> List[BalancerNode]:
    out = []
    for app in scn.apps:
        cluster = build_cluster(app, addresses)
        for lb in app.balancers:
            out.append(BalancerNode(lb.vip, lb.algorithm, cluster, lb.forward_capacity, mode, probe))
    return out


def build_sim_system(scn: ScenarioFile, seed: Optional[int] = None, page_jitter: float = 0.0) -> SimSystem:
    return SimSystem(
        build_selectors(scn),
        build_balancers(scn, Mode.DIRECT_ROUTING),
        scn.topology,
        seed=scn.seed if seed is None else seed,
        page_jitter=page_jitter,
        resolve_cache=scn.resolve_cache,
    )
