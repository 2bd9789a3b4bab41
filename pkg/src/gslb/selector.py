"""Level-1 balancer selector: round-robin name resolution with a slave replica."""
from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, field
from typing import Dict, List

from .model import Health


class SelectorError(Exception):
    pass


class UnknownApp(SelectorError):
    pass


class NodeDown(SelectorError):
    pass


class LastAddress(SelectorError):
    pass


class DuplicateAddress(SelectorError):
    pass


class AllSelectorsDown(SelectorError):
    pass


class Role(str, enum.Enum):
    MASTER = "Master"
    SLAVE = "Slave"


@dataclass
class SelectorEntry:
    app_id: str
    balancer_addresses: List[str]
    cursor: int = 0


@dataclass
class SelectorNode:
    node_id: str
    role: Role = Role.MASTER
    health: Health = Health.UP
    entries: Dict[str, SelectorEntry] = field(default_factory=dict)
    replicas: List["SelectorNode"] = field(default_factory=list, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @property
    def up(self) -> bool:
        return self.health is Health.UP

    def table(self) -> Dict[str, List[str]]:
        return {app: list(e.balancer_addresses) for app, e in self.entries.items()}


def make_pair(master_id: str, slave_id: str | None = None) -> List[SelectorNode]:
    """A master plus (optionally) one slave that mirrors every mutation."""
    master = SelectorNode(master_id, Role.MASTER)
    nodes = [master]
    if slave_id is not None:
        slave = SelectorNode(slave_id, Role.SLAVE)
        master.replicas.append(slave)
        nodes.append(slave)
    return nodes


def resolve_app(node: SelectorNode, app_id: str) -> str:
    if not node.up:
        raise NodeDown(node.node_id)
    with node._lock:
        entry = node.entries.get(app_id)
        if entry is None:
            raise UnknownApp(app_id)
        address = entry.balancer_addresses[entry.cursor]
        entry.cursor = (entry.cursor + 1) % len(entry.balancer_addresses)
        return address


def _register(node: SelectorNode, app_id: str, address: str) -> SelectorEntry:
    with node._lock:
        entry = node.entries.get(app_id)
        if entry is None:
            entry = node.entries[app_id] = SelectorEntry(app_id, [address])
            return entry
        if address in entry.balancer_addresses:
            raise DuplicateAddress(f"{app_id}: {address}")
        entry.balancer_addresses.append(address)
        return entry


def _deregister(node: SelectorNode, app_id: str, address: str) -> SelectorEntry:
    with node._lock:
        entry = node.entries.get(app_id)
        if entry is None:
            raise UnknownApp(app_id)
        if address not in entry.balancer_addresses:
            raise KeyError(f"{app_id}: {address} not registered")
        if len(entry.balancer_addresses) == 1:
            raise LastAddress(f"{app_id}: refusing to remove {address}")
        entry.balancer_addresses.remove(address)
        entry.cursor %= len(entry.balancer_addresses)
        return entry


def register_balancer(node: SelectorNode, app_id: str, address: str) -> SelectorEntry:
    entry = _register(node, app_id, address)
    for replica in node.replicas:
        _register(replica, app_id, address)
    return entry


def deregister_balancer(node: SelectorNode, app_id: str, address: str) -> SelectorEntry:
    entry = _deregister(node, app_id, address)
    for replica in node.replicas:
        _deregister(replica, app_id, address)
    return entry


def first_up(nodes: List[SelectorNode]) -> SelectorNode:
    for node in nodes:
        if node.up:
            return node
    raise AllSelectorsDown("no selector node is up")


def ha_resolve(nodes: List[SelectorNode], app_id: str) -> str:
    """Resolve through the first Up node, master first."""
    return resolve_app(first_up(nodes), app_id)
