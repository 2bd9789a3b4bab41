from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gslb.model import Health
from gslb.selector import (
    AllSelectorsDown,
    DuplicateAddress,
    LastAddress,
    NodeDown,
    UnknownApp,
    deregister_balancer,
    ha_resolve,
    make_pair,
    register_balancer,
    resolve_app,
)


@pytest.fixture
def pair():
    master, slave = make_pair("lbs-1", "lbs-2")
    register_balancer(master, "AP1", "LB1")
    register_balancer(master, "AP2", "LB2")
    register_balancer(master, "AP2", "LB3")
    return master, slave


def test_single_balancer_app_always_resolves_to_it(pair):
    master, _ = pair
    assert {resolve_app(master, "AP1") for _ in range(5)} == {"LB1"}


def test_next_request_goes_to_next_balancer(pair):
    master, _ = pair
    assert [resolve_app(master, "AP2") for _ in range(3)] == ["LB2", "LB3", "LB2"]


def test_unknown_app_and_down_node(pair):
    master, _ = pair
    with pytest.raises(UnknownApp):
        resolve_app(master, "NOPE")
    master.health = Health.DOWN
    with pytest.raises(NodeDown):
        resolve_app(master, "AP1")


def test_register_guards(pair):
    master, slave = pair
    entry = register_balancer(master, "AP1", "LB9")
    assert entry.balancer_addresses == ["LB1", "LB9"]
    with pytest.raises(DuplicateAddress):
        register_balancer(master, "AP1", "LB1")
    deregister_balancer(master, "AP1", "LB9")
    with pytest.raises(LastAddress):
        deregister_balancer(master, "AP1", "LB1")
    assert master.table() == slave.table()


def test_deregister_clamps_cursor(pair):
    master, _ = pair
    resolve_app(master, "AP2")  # cursor -> 1
    deregister_balancer(master, "AP2", "LB3")
    assert master.entries["AP2"].cursor == 0
    assert resolve_app(master, "AP2") == "LB2"


def test_ha_resolve_order(pair):
    master, slave = pair
    assert ha_resolve([master, slave], "AP1") == "LB1"
    master.health = Health.DOWN
    assert ha_resolve([master, slave], "AP1") == "LB1"
    assert slave.entries["AP1"].cursor == 0 and master.entries["AP2"].cursor == 0
    slave.health = Health.DOWN
    with pytest.raises(AllSelectorsDown):
        ha_resolve([master, slave], "AP1")


def test_master_and_slave_rotate_independently(pair):
    master, slave = pair
    assert resolve_app(master, "AP2") == "LB2"
    assert resolve_app(slave, "AP2") == "LB2"


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 10))
def test_rotation_fairness(m, k):
    (master,) = make_pair("a")
    for i in range(m):
        register_balancer(master, "APP", f"LB{i}")
    counts = Counter(resolve_app(master, "APP") for _ in range(m * k))
    assert set(counts.values()) == {k} and len(counts) == m


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 4)), max_size=30))
def test_replication_after_any_mutation_sequence(ops):
    master, slave = make_pair("m", "s")
    register_balancer(master, "APP", "LB0")
    for add, i in ops:
        try:
            if add:
                register_balancer(master, "APP", f"LB{i}")
            else:
                deregister_balancer(master, "APP", f"LB{i}")
        except (DuplicateAddress, LastAddress, KeyError):
            pass
        assert master.table() == slave.table()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 30), st.integers(1, 30))
def test_failover_transparency(kill_at, n):
    master, slave = make_pair("m", "s")
    register_balancer(master, "AP", "LB1")
    register_balancer(master, "AP", "LB2")
    for i in range(n):
        if i == kill_at:
            master.health = Health.DOWN
        assert ha_resolve([master, slave], "AP") in {"LB1", "LB2"}
