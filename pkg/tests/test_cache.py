from __future__ import annotations

import pytest

from robsim.cache import AccessOutcome, CacheConfig, CacheState


def make_cache(**kw) -> CacheState:
    return CacheState(CacheConfig(**kw))


def test_hit_latency_and_mru_update():
    cache = make_cache(ways=2)
    cache.warm(5)
    cache.warm(69)  # same set as 5 under 64 sets
    assert cache.snapshot_set(5) == [69, 5]
    res = cache.access(5, cycle=10)
    assert res.outcome == AccessOutcome.HIT
    assert res.latency == 3
    assert cache.snapshot_set(5) == [5, 69]


def test_cold_miss_schedules_fill():
    cache = make_cache()
    res = cache.access(7, cycle=100)
    assert res.outcome == AccessOutcome.MISS
    assert res.latency == 60
    assert res.fill_cycle == 160
    assert not cache.resident(7)
    assert cache.process_fills(159) == []
    assert cache.process_fills(160) == [7]
    assert cache.resident(7)


def test_mshr_capacity_rejects_eleventh_miss():
    cache = make_cache(mshr_entries=10)
    for i in range(10):
        assert cache.access(i, cycle=0).outcome == AccessOutcome.MISS
    res = cache.access(10, cycle=0)
    assert res.outcome == AccessOutcome.MSHR_STALL
    assert cache.mshr_stalls == 1
    cache.process_fills(60)
    assert cache.access(10, cycle=61).outcome == AccessOutcome.MISS


def test_unbounded_mshrs():
    cache = make_cache(mshr_entries=None)
    for i in range(500):
        assert cache.access(i, cycle=0).outcome == AccessOutcome.MISS


def test_coalesce_with_in_flight_line():
    cache = make_cache()
    first = cache.access(9, cycle=0)
    again = cache.access(9, cycle=20)
    assert again.outcome == AccessOutcome.MISS
    assert again.coalesced
    assert again.fill_cycle == first.fill_cycle == 60
    assert again.latency == 40
    assert len(cache.mshrs) == 1


def test_direct_mapped_conflict_fill_evicts():
    # ways=1: the set holds one line; a later fill replaces the earlier one.
    cache = make_cache(ways=1)
    cache.access(12, cycle=0)  # fill at 60
    cache.access(76, cycle=1)  # same set (12 % 64 == 76 % 64), fill at 61
    cache.process_fills(60)
    assert cache.snapshot_set(12) == [12]
    cache.process_fills(61)
    assert cache.snapshot_set(12) == [76]


def test_hit_under_conflicting_fill_in_flight():
    # a resident line keeps hitting while a conflicting fill is pending
    cache = make_cache(ways=1)
    cache.warm(76)
    cache.access(12, cycle=0)  # miss, fill at 60 will evict 76
    res = cache.access(76, cycle=5)
    assert res.outcome == AccessOutcome.HIT
    cache.process_fills(60)
    assert cache.snapshot_set(12) == [12]


def test_lru_two_way_evicts_least_recent():
    # oracle: accesses A, B, A then fill C -> B is LRU and gets evicted
    cache = make_cache(ways=2)
    a, b, c = 3, 67, 131  # one set
    cache.warm(a)
    cache.warm(b)
    cache.access(a, cycle=0)
    assert cache.snapshot_set(3) == [a, b]
    cache.access(c, cycle=1)
    cache.process_fills(61)
    assert cache.snapshot_set(3) == [c, a]


def test_suppressed_replacement_then_deferred_touch():
    cache = make_cache(ways=2)
    a, b = 4, 68
    cache.warm(a)
    cache.warm(b)  # order now [b, a]
    before = cache.snapshot_set(4)
    res = cache.access(a, cycle=2, deferred_effects=True)
    assert res.outcome == AccessOutcome.HIT
    assert cache.snapshot_set(4) == before  # invisible until commit
    cache.touch(a)
    assert cache.snapshot_set(4) == [a, b]
    cache.flush(a)
    cache.touch(a)  # line gone: deferred update drops silently
    assert cache.snapshot_set(4) == [b]


def test_flush_removes_line():
    cache = make_cache()
    cache.warm(40)
    assert cache.resident(40)
    cache.flush(40)
    assert not cache.resident(40)
    cache.flush(40)  # idempotent


def test_config_validation():
    with pytest.raises(ValueError):
        CacheConfig(hit_cycles=5, miss_cycles=5)
    with pytest.raises(ValueError):
        CacheConfig(num_sets=0)
    with pytest.raises(ValueError):
        CacheConfig(mshr_entries=0)


def test_extra_latency_shifts_fresh_miss_only():
    cache = make_cache()
    res = cache.access(100, cycle=10, extra_latency=5)
    assert res.latency == 65 and res.fill_cycle == 75
    # coalescing ignores the perturbation of the second access
    res2 = cache.access(100, cycle=20, extra_latency=-3)
    assert res2.coalesced and res2.latency == 55
    cache.warm(7)
    hit = cache.access(7, cycle=30, extra_latency=9)
    assert hit.outcome == AccessOutcome.HIT and hit.latency == 3
