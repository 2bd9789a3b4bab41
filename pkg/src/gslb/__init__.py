"""Two-level global server load balancing: a round-robin selector in front of
LVS-style balancers, simulated deterministically or run live on loopback."""

__version__ = "0.1.0"
