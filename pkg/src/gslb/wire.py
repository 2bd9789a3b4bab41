"""Loopback realization: line-protocol resolvers, an HTTP reverse proxy per
balancer, static backends with distinct bodies, and health probing.

Resolver protocol, one query per TCP connection, ASCII, LF-terminated::

    RESOLVE <app_id>   ->   OK <host:port> | ERR UNKNOWN_APP | ERR NO_BALANCER | ERR MALFORMED
"""
from __future__ import annotations

import http.client
import logging
import re
import socket
import socketserver
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Dict, List, Optional

from .balancer import BalancerNode, HealthProbeConfig, NoHealthyBackend, Overloaded, Request
from .selector import AllSelectorsDown, NodeDown, SelectorNode, UnknownApp, resolve_app

log = logging.getLogger(__name__)

DEFAULT_CONNECT_TIMEOUT = 0.2
SOURCE_HEADER = "X-Client-Source"
_TOKEN = re.compile(rb"SERVER=(\d+)")
_MAX_LINE = 512


class BindFailure(OSError):
    pass


def split_address(address: str) -> tuple:
    host, _, port = address.rpartition(":")
    return host, int(port)


def _bind(server_cls, address: str, handler):
    try:
        return server_cls(split_address(address), handler)
    except OSError as exc:
        raise BindFailure(f"cannot bind {address} (port {split_address(address)[1]}): {exc.strerror}") from None


class _Service:
    """A socketserver running on a background thread."""

    def __init__(self, name: str, server):
        self.name = name
        self.server = server
        self.thread = threading.Thread(target=server.serve_forever, kwargs={"poll_interval": 0.05},
                                       name=name, daemon=True)
        self.thread.start()
        self.running = True

    @property
    def address(self) -> str:
        host, port = self.server.server_address[:2]
        return f"{host}:{port}"

    def stop(self) -> None:
        if not self.running:
            return
        self.running = False
        self.server.shutdown()
        self.server.server_close()
        self.thread.join(timeout=5)


# ------------------------------------------------------------------ resolver

class _ResolverTCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True
    request_queue_size = 128


def handle_resolve_line(node: SelectorNode, line: bytes) -> bytes:
    try:
        text = line.decode("ascii").rstrip("\r\n")
    except UnicodeDecodeError:
        return b"ERR MALFORMED\n"
    parts = text.split(" ")
    if len(parts) != 2 or parts[0] != "RESOLVE" or not parts[1]:
        return b"ERR MALFORMED\n"
    try:
        return f"OK {resolve_app(node, parts[1])}\n".encode("ascii")
    except UnknownApp:
        return b"ERR UNKNOWN_APP\n"
    except NodeDown:
        return b"ERR NO_BALANCER\n"


def serve_resolver(node: SelectorNode, address: str) -> _Service:
    class Handler(socketserver.StreamRequestHandler):
        timeout = 2.0

        def handle(self):
            try:
                line = self.rfile.readline(_MAX_LINE)
            except OSError:
                return
            if not line.endswith(b"\n"):
                self.wfile.write(b"ERR MALFORMED\n")
                return
            self.wfile.write(handle_resolve_line(node, line))

    return _Service(f"resolver-{node.node_id}", _bind(_ResolverTCPServer, address, Handler))


def query_resolver(address: str, app_id: str, timeout: float = DEFAULT_CONNECT_TIMEOUT) -> str:
    """One RESOLVE round trip; returns the raw response line without LF."""
    host, port = split_address(address)
    with socket.create_connection((host, port), timeout=timeout) as sock:
        sock.settimeout(max(timeout, 1.0))
        sock.sendall(f"RESOLVE {app_id}\n".encode("ascii"))
        data = b""
        while not data.endswith(b"\n"):
            chunk = sock.recv(_MAX_LINE)
            if not chunk:
                break
            data += chunk
    return data.decode("ascii").rstrip("\n")


def live_resolve_with_failover(master: str, slave: Optional[str], app_id: str,
                               timeout: float = DEFAULT_CONNECT_TIMEOUT) -> str:
    last = None
    for address in [master, slave]:
        if address is None:
            continue
        try:
            reply = query_resolver(address, app_id, timeout)
        except OSError as exc:
            last = exc
            continue
        if reply.startswith("OK "):
            return reply[3:]
        if reply == "ERR UNKNOWN_APP":
            raise UnknownApp(app_id)
        last = reply
    raise AllSelectorsDown(f"{app_id}: {last}")


# ------------------------------------------------------------------ backends

@dataclass
class StaticSite:
    backend_id: int
    app_id: str = ""
    page_size: int = 0

    @property
    def body(self) -> bytes:
        head = f"<html><body>SERVER={self.backend_id} APP={self.app_id}</body></html>\n".encode("ascii")
        if len(head) < self.page_size:
            head += b"." * (self.page_size - len(head) - 1) + b"\n"
        return head


class _HTTPServer(ThreadingHTTPServer):
    request_queue_size = 128


class _QuietHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)

    def reply(self, status: int, body: bytes, headers: Optional[dict] = None):
        self.send_response(status)
        self.send_header("Content-Type", "text/plain" if status != 200 else "text/html")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Connection", "close")
        for k, v in (headers or {}).items():
            self.send_header(k, v)
        self.end_headers()
        self.wfile.write(body)
        self.close_connection = True


def serve_backend(site: StaticSite, address: str) -> _Service:
    body = site.body

    class Handler(_QuietHandler):
        def do_GET(self):
            if self.path == "/health":
                self.reply(200, b"ok")
            else:
                self.reply(200, body, {"X-Backend-Id": str(site.backend_id)})

    return _Service(f"backend-{site.app_id}-{site.backend_id}", _bind(_HTTPServer, address, Handler))


def http_get(address: str, path: str = "/", timeout: float = 5.0, headers: Optional[dict] = None):
    host, port = split_address(address)
    conn = http.client.HTTPConnection(host, port, timeout=timeout)
    try:
        conn.request("GET", path, headers=headers or {})
        resp = conn.getresponse()
        return resp.status, resp.read(), dict(resp.getheaders())
    finally:
        conn.close()


# --------------------------------------------------------------------- proxy

def serve_proxy(balancer: BalancerNode, address: str, connect_timeout: float = 1.0) -> _Service:
    """HTTP/1.1 GET reverse proxy; one dispatch/complete pair per request."""
    ids = iter(range(1, 1 << 62))
    id_lock = threading.Lock()

    class Handler(_QuietHandler):
        def do_GET(self):
            with id_lock:
                rid = next(ids)
            source = self.headers.get(SOURCE_HEADER) or self.client_address[0]
            req = Request(rid, balancer.cluster.app_id, source)
            try:
                balancer.admit(req, time.monotonic())
                assignment = balancer.dispatch(req, time.monotonic())
            except (NoHealthyBackend, Overloaded) as exc:
                self.reply(503, f"{type(exc).__name__}\n".encode())
                return
            backend = balancer.cluster.backend(assignment.backend_id)
            try:
                status, body, _ = http_get(backend.address, self.path, timeout=connect_timeout)
            except OSError:
                balancer.abort(assignment)
                balancer.probe_tick({backend.id: False})
                self.reply(502, b"BadGateway\n")
                return
            # settle before replying so a client never sees its own request open
            balancer.complete(assignment, len(body))
            self.reply(status, body, {"X-Backend-Id": str(backend.id)})

    return _Service(f"proxy-{balancer.vip}", _bind(_HTTPServer, address, Handler))


class ProbeLoop:
    """Periodic GET /health on every backend, fed into ``probe_tick``."""

    def __init__(self, balancer: BalancerNode, config: Optional[HealthProbeConfig] = None):
        self.balancer = balancer
        self.config = config or balancer.probe
        self._stop = threading.Event()
        self.thread = threading.Thread(target=self._run, name=f"probe-{balancer.vip}", daemon=True)
        self.transitions: List[tuple] = []

    def probe_once(self) -> Dict[int, bool]:
        results = {}
        timeout = min(self.config.interval, 0.5)
        for b in self.balancer.cluster.backends:
            try:
                status, body, _ = http_get(b.address, "/health", timeout=timeout)
                results[b.id] = status == 200 and body == b"ok"
            except OSError:
                results[b.id] = False
        return results

    def _run(self):
        while not self._stop.wait(self.config.interval):
            for t in self.balancer.probe_tick(self.probe_once()):
                log.info("%s: backend %s -> %s", self.balancer.vip, t[0], t[1].value)
                self.transitions.append(t)

    def start(self) -> "ProbeLoop":
        self.thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        self.thread.join(timeout=5)


def live_probe_loop(balancer: BalancerNode, config: Optional[HealthProbeConfig] = None) -> ProbeLoop:
    return ProbeLoop(balancer, config).start()


# -------------------------------------------------------------------- client

@dataclass
class FetchResult:
    ok: bool
    backend_id: Optional[int] = None
    nbytes: int = 0
    balancer: Optional[str] = None
    error: Optional[str] = None
    body: bytes = b""
    resolve_time: float = 0.0


@dataclass
class LiveClient:
    """Resolve through the selector pair, then GET / from the balancer."""

    master: str
    slave: Optional[str] = None
    connect_timeout: float = DEFAULT_CONNECT_TIMEOUT
    http_timeout: float = 10.0
    resolve_times: List[float] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def fetch(self, source: str, app_id: str) -> FetchResult:
        t0 = time.monotonic()
        try:
            vip = live_resolve_with_failover(self.master, self.slave, app_id, self.connect_timeout)
        except (AllSelectorsDown, UnknownApp) as exc:
            return FetchResult(False, error=type(exc).__name__, resolve_time=time.monotonic() - t0)
        dt = time.monotonic() - t0
        with self._lock:
            self.resolve_times.append(dt)
        try:
            status, body, _ = http_get(vip, "/", self.http_timeout, {SOURCE_HEADER: source})
        except OSError as exc:
            return FetchResult(False, balancer=vip, error=type(exc).__name__, resolve_time=dt)
        if status != 200:
            return FetchResult(False, balancer=vip, error=f"HTTP{status}", body=body, resolve_time=dt)
        m = _TOKEN.search(body)
        return FetchResult(True, int(m.group(1)) if m else None, len(body), vip, body=body, resolve_time=dt)
