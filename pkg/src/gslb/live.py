"""Start/stop a whole scenario topology on loopback, plus a control channel.

Component names: ``selector-master``, ``selector-slave``, ``balancer-<vip>``,
``backend-<app_id>-<id>``. The control channel is the same one-line-per-
connection style as the resolver: ``KILL <name>``, ``STATUS``, ``SHUTDOWN``.
"""
from __future__ import annotations

import json
import logging
import socket
import socketserver
import threading
from typing import Dict, List, Optional

from .balancer import BalancerNode, HealthProbeConfig, Mode
from .scenario import ScenarioFile, build_balancers, build_selectors
from .wire import (
    LiveClient,
    ProbeLoop,
    StaticSite,
    _bind,
    _ResolverTCPServer,
    _Service,
    serve_backend,
    serve_proxy,
    serve_resolver,
    split_address,
)

log = logging.getLogger(__name__)


class LiveDeployment:
    def __init__(self, scn: ScenarioFile, probe: Optional[HealthProbeConfig] = None,
                 connect_timeout: float = 0.2):
        self.scn = scn
        self.probe = probe or HealthProbeConfig()
        self.connect_timeout = connect_timeout
        self.addresses = scn.backend_addresses()
        self.selectors = build_selectors(scn)
        self.balancers: List[BalancerNode] = build_balancers(scn, Mode.PROXY, self.probe, self.addresses)
        self.services: Dict[str, _Service] = {}
        self.probes: List[ProbeLoop] = []
        self.shutdown_requested = threading.Event()
        self._control: Optional[_Service] = None

    def start(self) -> "LiveDeployment":
        try:
            for app in self.scn.apps:
                for b in app.backends:
                    name = f"backend-{app.app_id}-{b.id}"
                    site = StaticSite(b.id, app.app_id, b.page_size)
                    self.services[name] = serve_backend(site, self.addresses[(app.app_id, b.id)])
            for lb in self.balancers:
                self.services[f"balancer-{lb.vip}"] = serve_proxy(lb, lb.vip)
            self.services["selector-master"] = serve_resolver(self.selectors[0], self.scn.master)
            if len(self.selectors) > 1:
                self.services["selector-slave"] = serve_resolver(self.selectors[1], self.scn.slave)
        except OSError:
            self.stop()
            raise
        for lb in self.balancers:
            self.probes.append(ProbeLoop(lb, self.probe).start())
        return self

    def listing(self) -> List[tuple]:
        return [(name, svc.address) for name, svc in self.services.items()]

    def kill(self, name: str) -> None:
        if name not in self.services:
            raise KeyError(name)
        self.services[name].stop()

    def restart_backend(self, app_id: str, backend_id: int) -> None:
        name = f"backend-{app_id}-{backend_id}"
        old = self.services[name]
        old.stop()
        page = self.scn.app(app_id)
        size = next(b.page_size for b in page.backends if b.id == backend_id)
        self.services[name] = serve_backend(StaticSite(backend_id, app_id, size), self.addresses[(app_id, backend_id)])

    def client(self) -> LiveClient:
        return LiveClient(self.scn.master, self.scn.slave, self.connect_timeout)

    def snapshot(self) -> List[dict]:
        return [lb.snapshot() for lb in self.balancers]

    def status(self) -> dict:
        return {name: svc.running for name, svc in self.services.items()}

    def stop(self) -> None:
        for p in self.probes:
            p.stop()
        self.probes.clear()
        if self._control is not None:
            self._control.stop()
            self._control = None
        for svc in self.services.values():
            svc.stop()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    # control channel

    def serve_control(self, address: str) -> _Service:
        deployment = self

        class Handler(socketserver.StreamRequestHandler):
            timeout = 2.0

            def handle(self):
                line = self.rfile.readline(512).decode("ascii", "replace").strip()
                cmd, _, arg = line.partition(" ")
                if cmd == "KILL":
                    try:
                        deployment.kill(arg)
                        reply = "OK"
                    except KeyError:
                        reply = f"ERR UNKNOWN_COMPONENT {arg}"
                elif cmd == "STATUS":
                    reply = "OK " + json.dumps(deployment.status(), sort_keys=True)
                elif cmd == "SHUTDOWN":
                    deployment.shutdown_requested.set()
                    reply = "OK"
                else:
                    reply = "ERR MALFORMED"
                self.wfile.write((reply + "\n").encode("ascii"))

        self._control = _Service("control", _bind(_ResolverTCPServer, address, Handler))
        return self._control


def control_command(address: str, line: str, timeout: float = 2.0) -> str:
    host, port = split_address(address)
    with socket.create_connection((host, port), timeout=timeout) as sock:
        sock.sendall((line + "\n").encode("ascii"))
        data = b""
        while not data.endswith(b"\n"):
            chunk = sock.recv(4096)
            if not chunk:
                break
            data += chunk
    return data.decode("ascii").strip()
