"""Start a loopback deployment, kill the master resolver, keep fetching.

Uses free ports, so it does not collide with a running ``gslb live up``.
"""
import socket
import time

from gslb.balancer import HealthProbeConfig
from gslb.live import LiveDeployment
from gslb.scenario import load_scenario


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def scenario():
    proxy, master, slave = free_port(), free_port(), free_port()
    return load_scenario({
        "mode": "live",
        "apps": [{
            "app_id": "AP1",
            "backends": [{"id": i, "capacity_bytes_per_s": 1e6, "page_size_bytes": 1024} for i in range(1, 6)],
            "balancers": [{"vip": f"127.0.0.1:{proxy}", "algorithm": "RoundRobin", "forward_capacity_rps": 10000}],
        }],
        "selectors": {"master": f"127.0.0.1:{master}", "slave": f"127.0.0.1:{slave}"},
        "workload": {"kind": "ab", "n_requests": 100, "concurrency": 1},
        "ports": {"host": "127.0.0.1", "backend_base": free_port()},
    })


def main():
    with LiveDeployment(scenario(), HealthProbeConfig(interval=0.2)) as dep:
        client = dep.client()
        before = [client.fetch("demo", "AP1") for _ in range(10)]
        print("before:", [r.backend_id for r in before])
        dep.kill("selector-master")
        t0 = time.monotonic()
        after = [client.fetch("demo", "AP1") for _ in range(100)]
        print(f"after master kill: {sum(r.ok for r in after)}/100 ok in {time.monotonic() - t0:.2f} s,"
              f" worst resolution {max(r.resolve_time for r in after) * 1000:.0f} ms")


if __name__ == "__main__":
    main()
