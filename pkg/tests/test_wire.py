import re
import socket
import threading
import time
from collections import Counter

import pytest

from gslb.balancer import BalancerNode, HealthProbeConfig, Mode
from gslb.live import LiveDeployment
from gslb.model import Backend, ClusterSpec, Health, SchedulerKind
from gslb.scenario import load_scenario
from gslb.selector import make_pair, register_balancer
from gslb.wire import (
    SOURCE_HEADER,
    LiveClient,
    ProbeLoop,
    StaticSite,
    handle_resolve_line,
    http_get,
    query_resolver,
    serve_backend,
    serve_proxy,
    serve_resolver,
)
from livekit import live_doc

pytestmark = pytest.mark.live

FAST_PROBE = HealthProbeConfig(interval=0.05, fail_threshold=3, rise_threshold=2)


def test_resolve_line_protocol():
    (node,) = make_pair("m")
    register_balancer(node, "AP2", "10.0.0.2:80")
    register_balancer(node, "AP2", "10.0.0.3:80")
    assert handle_resolve_line(node, b"RESOLVE AP2\n") == b"OK 10.0.0.2:80\n"
    assert handle_resolve_line(node, b"RESOLVE AP2\n") == b"OK 10.0.0.3:80\n"
    assert handle_resolve_line(node, b"RESOLVE AP9\n") == b"ERR UNKNOWN_APP\n"
    for bad in [b"resolve AP2\n", b"RESOLVE\n", b"RESOLVE a b\n", b"\xff\n"]:
        assert handle_resolve_line(node, bad) == b"ERR MALFORMED\n"
    node.health = Health.DOWN
    assert handle_resolve_line(node, b"RESOLVE AP2\n") == b"ERR NO_BALANCER\n"


def test_resolver_over_tcp(ports):
    (node,) = make_pair("m")
    register_balancer(node, "AP1", "127.0.0.1:9")
    (p,) = ports(1)
    svc = serve_resolver(node, f"127.0.0.1:{p}")
    try:
        assert query_resolver(svc.address, "AP1") == "OK 127.0.0.1:9"
        with socket.create_connection(("127.0.0.1", p), timeout=2) as s:
            s.sendall(b"HELLO\n")
            assert s.recv(64) == b"ERR MALFORMED\n"
    finally:
        svc.stop()


def test_backend_serves_body_and_health(ports):
    (p,) = ports(1)
    site = StaticSite(3, "AP1", 300)
    svc = serve_backend(site, f"127.0.0.1:{p}")
    try:
        status, body, headers = http_get(svc.address)
        assert status == 200 and len(body) == 300
        assert body.startswith(b"<html><body>SERVER=3 APP=AP1</body></html>")
        assert headers["X-Backend-Id"] == "3"
        assert http_get(svc.address, "/health")[:2] == (200, b"ok")
    finally:
        svc.stop()


class Rig:
    """Backends plus one proxy, no selectors."""

    def __init__(self, ports, n=5, kind=SchedulerKind.ROUND_ROBIN, page=256):
        addrs = [f"127.0.0.1:{p}" for p in ports(n + 1)]
        self.cluster = ClusterSpec("AP1", [Backend(i + 1, addrs[i], page_size=page) for i in range(n)])
        self.sites = [StaticSite(i + 1, "AP1", page) for i in range(n)]
        self.backends = [serve_backend(s, a) for s, a in zip(self.sites, addrs)]
        self.lb = BalancerNode(addrs[-1], kind, self.cluster, 1e6, Mode.PROXY, FAST_PROBE)
        self.proxy = serve_proxy(self.lb, addrs[-1], connect_timeout=0.5)

    def get(self, source="c"):
        return http_get(self.proxy.address, "/", headers={SOURCE_HEADER: source})

    def stop(self):
        self.proxy.stop()
        for b in self.backends:
            b.stop()


@pytest.fixture
def rig(ports):
    r = Rig(ports)
    yield r
    r.stop()


def _server(body):
    return int(re.search(rb"SERVER=(\d+)", body).group(1))


def test_proxy_rr_cycles_twice(rig):
    seen = [_server(rig.get()[1]) for _ in range(10)]
    assert seen == [1, 2, 3, 4, 5] * 2
    assert rig.lb.conservation_ok()
    assert rig.lb.counters.bytes_response_out == 10 * 256


def test_proxy_byte_fidelity(rig):
    for site in rig.sites:
        status, body, _ = rig.get()
        assert status == 200
        assert body == rig.sites[_server(body) - 1].body


def test_proxy_source_hash_affinity(ports):
    r = Rig(ports, kind=SchedulerKind.SOURCE_HASH)
    try:
        for src in ["10.0.0.1", "10.0.0.2", "192.168.7.7"]:
            assert len({_server(r.get(src)[1]) for _ in range(5)}) == 1
    finally:
        r.stop()


def test_all_backends_down_gives_503_without_dispatch(rig):
    for b in rig.backends:
        b.stop()
    loop = ProbeLoop(rig.lb, FAST_PROBE).start()
    try:
        deadline = time.monotonic() + 3
        while any(b.health is Health.UP for b in rig.cluster.backends) and time.monotonic() < deadline:
            time.sleep(0.02)
        dispatched = rig.lb.counters.requests_dispatched
        status, body, _ = rig.get()
        assert status == 503 and body == b"NoHealthyBackend\n"
        assert rig.lb.counters.requests_dispatched == dispatched
        assert rig.lb.conservation_ok()
    finally:
        loop.stop()


def test_probe_down_then_up(rig):
    loop = ProbeLoop(rig.lb, FAST_PROBE).start()
    try:
        rig.backends[1].stop()
        _wait(lambda: rig.cluster.backend(2).health is Health.DOWN)
        assert all(_server(rig.get()[1]) != 2 for _ in range(8))
        rig.backends[1] = serve_backend(rig.sites[1], rig.cluster.backend(2).address)
        _wait(lambda: rig.cluster.backend(2).health is Health.UP)
        assert 2 in {_server(rig.get()[1]) for _ in range(5)}
        assert [t[1] for t in loop.transitions if t[0] == 2] == [Health.DOWN, Health.UP]
    finally:
        loop.stop()


def test_connect_failure_is_502_and_not_counted_as_served(rig):
    rig.backends[0].stop()
    status, _, _ = rig.get()
    assert status == 502
    assert rig.lb.counters.requests_rejected == 1 and rig.lb.conservation_ok()
    assert rig.lb.in_flight == 0


def test_five_thousand_balanced(rig):
    hits = Counter()
    lock = threading.Lock()

    def worker(k):
        for _ in range(500):
            s = _server(rig.get(f"10.0.0.{k}")[1])
            with lock:
                hits[s] += 1

    threads = [threading.Thread(target=worker, args=(k,)) for k in range(10)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sum(hits.values()) == 5000
    # RR under one lock: each backend takes exactly a fifth
    assert hits == {i: 1000 for i in range(1, 6)}
    assert rig.lb.conservation_ok()


def _wait(cond, timeout=3.0):
    deadline = time.monotonic() + timeout
    while not cond():
        if time.monotonic() > deadline:
            raise AssertionError("condition not reached")
        time.sleep(0.02)


# -------------------------------------------------------------- deployment

@pytest.fixture
def deployment(ports):
    dep = LiveDeployment(load_scenario(live_doc(ports, n_backends=5)), FAST_PROBE).start()
    yield dep
    dep.stop()


def test_failover_to_slave_under_a_second(deployment):
    client = deployment.client()
    assert client.fetch("c", "AP1").ok
    deployment.kill("selector-master")
    results = [client.fetch(f"c{i}", "AP1") for i in range(100)]
    assert sum(not r.ok for r in results) == 0
    assert max(r.resolve_time for r in results) < 1.0


def test_all_selectors_down(deployment):
    deployment.kill("selector-master")
    deployment.kill("selector-slave")
    res = deployment.client().fetch("c", "AP1")
    assert not res.ok and res.error == "AllSelectorsDown"


def test_unknown_app_is_not_a_failover(deployment):
    res = LiveClient(deployment.scn.master, deployment.scn.slave).fetch("c", "nope")
    assert res.error == "UnknownApp"


def test_concurrent_clients_see_distinct_servers(deployment):
    seen = set()

    def go(k):
        for _ in range(5):
            seen.add(deployment.client().fetch(f"s{k}", "AP1").backend_id)

    threads = [threading.Thread(target=go, args=(k,)) for k in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(seen) > 1
