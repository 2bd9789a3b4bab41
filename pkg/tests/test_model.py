import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gslb import model
from gslb.model import (
    Backend,
    ClusterSpec,
    EmptyPool,
    Health,
    SchedulerKind,
    SchedulerState,
    UnderflowClose,
    build_sh_table,
    healthy_pool,
    note_close,
    note_connect,
    pick_least_connection,
    pick_round_robin,
    pick_source_hash,
    pick_weighted_least_connection,
    pick_weighted_round_robin,
)
from oracles import argmin_conns, argmin_ratio, wrr_cycle


def pool_of(*weights, conns=None):
    conns = conns or [0] * len(weights)
    return [Backend(i + 1, weight=w, active_conns=c) for i, (w, c) in enumerate(zip(weights, conns))]


def test_backend_rejects_bad_fields():
    with pytest.raises(ValueError):
        Backend(1, weight=0)
    with pytest.raises(ValueError):
        Backend(1, capacity=0)
    with pytest.raises(ValueError):
        Backend(1, page_size=0)


def test_cluster_sorts_and_rejects_duplicates():
    c = ClusterSpec("AP1", [Backend(3), Backend(1), Backend(2)])
    assert [b.id for b in c.backends] == [1, 2, 3]
    with pytest.raises(ValueError):
        ClusterSpec("AP1", [Backend(1), Backend(1)])
    with pytest.raises(ValueError):
        ClusterSpec("AP1", [])


@pytest.mark.parametrize(
    "health, expected",
    [
        ([Health.UP, Health.UP, Health.UP], [1, 2, 3]),
        ([Health.UP, Health.DOWN, Health.UP], [1, 3]),
        ([Health.DOWN, Health.DOWN, Health.DOWN], []),
    ],
)
def test_healthy_pool(health, expected):
    c = ClusterSpec("AP1", [Backend(i + 1, health=h) for i, h in enumerate(health)])
    assert [b.id for b in healthy_pool(c)] == expected


def test_round_robin_sequence():
    state = SchedulerState()
    pool = pool_of(1, 1, 1)
    assert [pick_round_robin(state, pool) for _ in range(4)] == [1, 2, 3, 1]


def test_round_robin_singleton_and_fairness():
    state = SchedulerState()
    assert {pick_round_robin(state, pool_of(1)) for _ in range(5)} == {1}
    state = SchedulerState()
    counts = Counter(pick_round_robin(state, pool_of(1, 1, 1)) for _ in range(300))
    assert counts == {1: 100, 2: 100, 3: 100}


def test_round_robin_cursor_clamped_when_pool_shrinks():
    state = SchedulerState(rr_cursor=4)
    assert pick_round_robin(state, pool_of(1, 1, 1)) == 2  # 4 mod 3 = 1


@pytest.mark.parametrize("pick", [
    lambda p: pick_round_robin(SchedulerState(), p),
    lambda p: pick_weighted_round_robin(SchedulerState(), p),
    pick_least_connection,
    pick_weighted_least_connection,
    lambda p: pick_source_hash(SchedulerState(), "1.2.3.4", p),
])
def test_empty_pool_raises(pick):
    with pytest.raises(EmptyPool):
        pick([])


def test_wrr_two_to_one():
    state = SchedulerState()
    pool = pool_of(2, 1)
    seq = [pick_weighted_round_robin(state, pool) for _ in range(9)]
    assert seq == [1, 1, 2] * 3
    assert [pool[i].id for i in wrr_cycle([2, 1])] == [1, 1, 2]


def test_wrr_three_to_one_counts():
    state = SchedulerState()
    pool = pool_of(3, 1)
    counts = Counter(pick_weighted_round_robin(state, pool) for _ in range(400))
    assert counts == {1: 300, 2: 100}


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=6), st.integers(1, 3))
def test_wrr_matches_enumerator(weights, cycles):
    pool = pool_of(*weights)
    cycle = [pool[i].id for i in wrr_cycle(weights)]
    state = SchedulerState()
    got = [pick_weighted_round_robin(state, pool) for _ in range(len(cycle) * cycles)]
    assert got == cycle * cycles
    # proportionality over one full cycle of length sum(weights) / gcd
    counts = Counter(cycle)
    for b in pool:
        assert counts[b.id] * sum(weights) == b.weight * len(cycle)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 5), st.integers(1, 40))
def test_wrr_equal_weights_is_round_robin(n, w, picks):
    pool = pool_of(*([w] * n))
    rr, wrr = SchedulerState(), SchedulerState()
    assert [pick_weighted_round_robin(wrr, pool) for _ in range(picks)] == [
        pick_round_robin(rr, pool) for _ in range(picks)
    ]


def test_least_connection_examples():
    assert pick_least_connection(pool_of(1, 1, 1)) == 1
    assert pick_least_connection(pool_of(1, 1, 1, conns=[2, 1, 5])) == 2


def test_least_connection_random_vs_oracle():
    rng = random.Random(11)
    for _ in range(1000):
        pool = pool_of(*[1] * 5, conns=[rng.randint(0, 4) for _ in range(5)])
        assert pick_least_connection(pool) == argmin_conns([(b.id, b.active_conns) for b in pool])


def test_wlc_examples():
    # A:(3 conns, weight 1)  B:(5 conns, weight 2) -> 3/1 > 5/2 so B
    assert pick_weighted_least_connection(pool_of(1, 2, conns=[3, 5])) == 2
    assert pick_weighted_least_connection(pool_of(3, 1, 2)) == 1


def test_wlc_random_vs_oracle():
    rng = random.Random(12)
    for _ in range(1000):
        pool = pool_of(*[rng.randint(1, 4) for _ in range(6)], conns=[rng.randint(0, 8) for _ in range(6)])
        expected = argmin_ratio([(b.id, b.active_conns, b.weight) for b in pool])
        assert pick_weighted_least_connection(pool) == expected


def test_fnv1a_reference_values():
    # published FNV-1a 32-bit test vectors
    assert model.fnv1a_32("") == 0x811C9DC5
    assert model.fnv1a_32("a") == 0xE40C292C
    assert model.fnv1a_32("foobar") == 0xBF9CF968


def test_source_hash_deterministic_and_singleton():
    state = SchedulerState()
    pool = pool_of(1, 1, 1)
    assert pick_source_hash(state, "10.0.0.7", pool) == pick_source_hash(state, "10.0.0.7", pool)
    single = SchedulerState()
    assert {pick_source_hash(single, f"10.0.0.{i}", pool_of(1)) for i in range(50)} == {1}


def test_source_hash_fresh_table_follows_weight_cycle():
    table = build_sh_table(pool_of(2, 1))
    assert table[:6] == [1, 1, 2, 1, 1, 2]
    assert Counter(table) == {1: 171, 2: 85}


@pytest.mark.parametrize("removed", [1, 2, 3, 4])
def test_source_hash_removal_only_moves_removed_buckets(removed):
    pool = pool_of(1, 1, 1, 1)
    before = build_sh_table(pool)
    after = build_sh_table([b for b in pool if b.id != removed], before)
    for bucket in range(model.SH_BUCKETS):
        if before[bucket] != removed:
            assert after[bucket] == before[bucket]
        else:
            assert after[bucket] != removed


def test_source_hash_readd_restores_share():
    pool = pool_of(1, 1, 1, 1)
    t0 = build_sh_table(pool)
    t1 = build_sh_table(pool[1:], t0)
    t2 = build_sh_table(pool, t1)
    assert Counter(t2)[1] == Counter(t0)[1]
    # buckets that did not move to the returning backend stay put
    assert all(a == b for a, b in zip(t1, t2) if b != 1)


def test_sh_table_version_tracks_healthy_set():
    state = SchedulerState()
    pool = pool_of(1, 1, 1)
    pick_source_hash(state, "x", pool)
    v = state.table_version
    pick_source_hash(state, "y", pool)
    assert state.table_version == v
    pick_source_hash(state, "y", pool[:2])
    assert state.table_version == v + 1
    assert set(state.sh_table) <= {1, 2}


def test_note_connect_close():
    b = Backend(1)
    note_connect(b)
    note_close(b)
    assert b.active_conns == 0
    with pytest.raises(UnderflowClose):
        note_close(b)
    for _ in range(100):
        note_connect(b)
    for _ in range(40):
        note_close(b)
    assert b.active_conns == 60


@settings(max_examples=50, deadline=None)
@given(
    st.sampled_from(list(SchedulerKind)),
    st.lists(st.tuples(st.booleans(), st.integers(1, 4), st.integers(0, 6)), min_size=1, max_size=6),
    st.lists(st.integers(0, 255), min_size=1, max_size=20),
)
def test_no_pick_returns_down_backend(kind, spec, sources):
    backends = [Backend(i + 1, weight=w, active_conns=c, health=Health.UP if up else Health.DOWN)
                for i, (up, w, c) in enumerate(spec)]
    pool = healthy_pool(ClusterSpec("AP", backends))
    state = SchedulerState()
    for s in sources:
        if not pool:
            with pytest.raises(EmptyPool):
                model.pick(kind, state, pool, str(s))
            return
        chosen = model.pick(kind, state, pool, f"10.0.0.{s}")
        assert chosen in {b.id for b in pool}


def test_scheduler_kind_parse():
    assert SchedulerKind.parse("wlc") is SchedulerKind.WEIGHTED_LEAST_CONNECTION
    assert SchedulerKind.parse("Round Robin") is SchedulerKind.ROUND_ROBIN
    assert SchedulerKind.parse("SourceHash") is SchedulerKind.SOURCE_HASH
    with pytest.raises(ValueError):
        SchedulerKind.parse("random")
