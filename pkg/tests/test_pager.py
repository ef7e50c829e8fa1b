import itertools
import math
from collections import OrderedDict

import pytest
from hypothesis import given
from hypothesis import strategies as st
from published import PAGER_ROW

from layerplan.pager import (
    PagerError,
    PagerState,
    PagerStats,
    PagingUnit,
    Tier,
    TierConfig,
    decode_trace,
    flatten_trace,
    hit_rate,
    init_placement,
    layer_units,
    parse_subblock,
    pmi,
    pmi_clusters,
    pmi_components,
    simulate,
    subblock_name,
)


def unit_sized(n):
    return [PagingUnit(i, (i,), 1) for i in range(n)]


# ---------------------------------------------------------------------------
# naming


def test_subblock_names_round_trip():
    for sid in range(10):
        assert parse_subblock(subblock_name(sid)) == sid
    assert subblock_name(5) == "L2.ffn"
    with pytest.raises(PagerError):
        parse_subblock("layer2")


# ---------------------------------------------------------------------------
# PMI clustering


def test_perfectly_coupled_pair_half_marginal():
    trace = [{0, 1}, {2}, {0, 1}, {2}]
    assert pmi(trace, 0, 1) == pytest.approx(math.log(2))
    units = pmi_clusters(trace, 0.1)
    assert [u.members for u in units] == [(0, 1), (2,)]


def test_independent_pair_not_grouped():
    trace = [{0, 1}, {0}, {1}, set()]
    assert pmi(trace, 0, 1) == 0.0
    for thr in (1e-12, 0.05, 1.0):
        assert [u.members for u in pmi_clusters(trace, thr)] == [(0,), (1,)]


def test_always_together_is_not_informative():
    # both present in every step: joint equals product of marginals
    assert pmi([{0, 1}] * 5, 0, 1) == 0.0


def test_never_together_has_no_edge():
    assert pmi([{0}, {1}], 0, 1) == -math.inf
    assert [u.members for u in pmi_clusters([{0}, {1}], -100)] == [(0,), (1,)]


def test_single_subblock_trace():
    units = pmi_clusters([{"L0.attn"}, {"L0.attn"}])
    assert len(units) == 1 and units[0].members == (0,)


def test_unaccessed_subblocks_become_singletons():
    units = pmi_clusters([{0, 1}, set()], 0.1, num_subblocks=4)
    assert [u.members for u in units] == [(0, 1), (2,), (3,)]


def test_unit_bytes_sum_members():
    units = pmi_clusters([{0, 1}, set()], 0.1, sizes={0: 5, 1: 7, 2: 3})
    assert [(u.members, u.nbytes) for u in units] == [((0, 1), 12), ((2,), 3)]


@pytest.mark.parametrize("thr", [math.inf, -math.inf, math.nan])
def test_non_finite_threshold(thr):
    with pytest.raises(PagerError):
        pmi_clusters([{0}], thr)


def test_empty_trace():
    with pytest.raises(PagerError):
        pmi_clusters([], 0.1)


def test_decode_trace_clusters_by_layer():
    units = pmi_clusters(decode_trace(4, 3), 0.05)
    assert [u.names for u in units] == [(f"L{i}.attn", f"L{i}.ffn") for i in range(4)]


@given(st.lists(st.sets(st.integers(0, 3)), min_size=1, max_size=10), st.floats(-2, 2))
def test_components_partition(trace, thr):
    comps = pmi_components(trace, thr, range(4))
    flat = [m for c in comps for m in c]
    assert sorted(flat) == list(range(4))
    assert [c[0] for c in comps] == sorted(c[0] for c in comps)
    # an edge always implies the same component
    where = {m: i for i, c in enumerate(comps) for m in c}
    for a, b in itertools.combinations(range(4), 2):
        if pmi(trace, a, b) >= thr:
            assert where[a] == where[b]


def test_components_order_invariant():
    trace = [{0, 1}, {2, 3}, {0, 1}, {1}, set()]
    assert pmi_components(trace, 0.1) == pmi_components(list(reversed(trace)), 0.1)


# ---------------------------------------------------------------------------
# placement


def test_placement_unconstrained_all_hot():
    units = layer_units(4)
    st_ = init_placement([0.1, 0.9, 0.4, 1.0], units, TierConfig(8, 0))
    assert all(t is Tier.HOT for t in st_.tier.values())
    simulate(st_, flatten_trace(decode_trace(4, 5)))
    assert st_.snapshot().faults == 0


def test_placement_no_capacity_all_cold():
    st_ = init_placement([0.1, 0.9, 0.4, 1.0], layer_units(4), TierConfig(0, 0))
    assert all(t is Tier.COLD for t in st_.tier.values())


def test_placement_by_importance():
    st_ = init_placement([0.1, 0.9, 0.4, 1.0], layer_units(4), TierConfig(4, 2))
    assert set(st_.tier_members(Tier.HOT)) == {3, 1}
    assert st_.tier_members(Tier.HOT)[-1] == 3  # most important is most recent
    assert st_.tier_members(Tier.WARM) == [2]
    assert st_.tier_members(Tier.COLD) == [0]


def test_placement_oversized_unit_warns():
    units = [PagingUnit(0, (0, 1), 10), PagingUnit(1, (2, 3), 1)]
    st_ = init_placement(None, units, TierConfig(4, 4))
    assert st_.tier[0] is Tier.COLD and st_.warnings
    tier, latency = st_.access(0)
    assert tier is Tier.COLD and latency == 10 and st_.tier[0] is Tier.COLD
    st_.check_invariants()


def test_overlapping_units_rejected():
    with pytest.raises(PagerError):
        PagerState([PagingUnit(0, (0,), 1), PagingUnit(1, (0, 1), 1)], TierConfig(1, 1))


# ---------------------------------------------------------------------------
# access


def test_repeated_access_hits():
    st_ = init_placement(None, unit_sized(3), TierConfig(1, 1))
    first = st_.access(2)
    for _ in range(5):
        assert st_.access(2) == (Tier.HOT, 0)
    assert first[0] is Tier.COLD
    assert st_.tier_members(Tier.HOT)[-1] == 2
    assert st_.snapshot().hits == 5


def test_round_robin_with_full_capacity():
    st_ = PagerState.cold_start(unit_sized(5), TierConfig(5, 0))
    for u in range(5):
        st_.access(u)
    before = st_.snapshot()
    for _ in range(10):
        for u in range(5):
            st_.access(u)
    after = st_.snapshot()
    assert after.faults == before.faults and after.hits - before.hits == 50


def test_warm_hit_promotes_single_unit():
    units = unit_sized(3)
    st_ = PagerState(units, TierConfig(1, 2), groups=[(0, 1)])
    for u, t in ((0, Tier.WARM), (1, Tier.WARM), (2, Tier.HOT)):
        st_._put(u, t)
    assert st_.access(0) == (Tier.WARM, 1)
    assert st_.tier[0] is Tier.HOT and st_.tier[1] is Tier.WARM and st_.tier[2] is Tier.WARM
    assert st_.snapshot().evictions == 1


def test_cold_hit_promotes_group():
    st_ = PagerState.cold_start(unit_sized(4), TierConfig(2, 2), groups=[(0, 2)])
    assert st_.access(2) == (Tier.COLD, 10)
    assert st_.tier[0] is Tier.HOT and st_.tier[2] is Tier.HOT
    assert st_.tier_members(Tier.HOT)[-1] == 2
    s = st_.snapshot()
    assert s.cold_faults == 1 and s.promotions == 2


def test_eviction_cascade():
    st_ = PagerState.cold_start(unit_sized(4), TierConfig(1, 1))
    for u in range(3):
        st_.access(u)
    assert st_.tier == {0: Tier.COLD, 1: Tier.WARM, 2: Tier.HOT, 3: Tier.COLD}


def test_unknown_unit():
    st_ = PagerState.cold_start(unit_sized(2), TierConfig(1, 1))
    with pytest.raises(PagerError):
        st_.access(7)
    with pytest.raises(PagerError):
        st_.access_subblock("L9.attn")


def test_prefetch_does_not_count():
    st_ = PagerState.cold_start(unit_sized(3), TierConfig(2, 0))
    st_.prefetch(1)
    s = st_.snapshot()
    assert st_.tier[1] is Tier.HOT and s.accesses == 0 and s.promotions == 1
    assert st_.access(1) == (Tier.HOT, 0)


def test_stats_examples():
    hits, faults, rate = PAGER_ROW
    assert round(hit_rate(hits, faults), 4) == rate
    empty = PagerStats(0, 0, 0, 0, 0)
    assert empty.hit_rate == 1.0 and empty.no_accesses


def test_snapshot_is_immutable_copy():
    st_ = PagerState.cold_start(unit_sized(2), TierConfig(1, 1))
    snap = st_.snapshot()
    st_.access(0)
    assert snap.accesses == 0 and st_.snapshot().accesses == 1


# ---------------------------------------------------------------------------
# oracles and invariants


class ReferencePager:
    """Independent tiered-LRU model: plain lists, least recent first."""

    def __init__(self, sizes, hot, warm, groups, placement):
        self.sizes, self.cap = sizes, {"hot": hot, "warm": warm}
        self.groups = groups
        self.lists = {"hot": [], "warm": [], "cold": []}
        for tier, members in placement.items():
            self.lists[tier] = list(members)
        self.count = {"hits": 0, "warm": 0, "cold": 0}

    def where(self, u):
        return next(t for t, l in self.lists.items() if u in l)

    def used(self, t):
        return sum(self.sizes[u] for u in self.lists[t])

    def make_room(self, t, need, pinned):
        below = {"hot": "warm", "warm": "cold"}[t]
        while self.cap[t] - self.used(t) < need:
            victim = next(u for u in self.lists[t] if u not in pinned)
            dest = below if below == "cold" or self.sizes[victim] <= self.cap[below] else "cold"
            if dest != "cold":
                self.make_room(dest, self.sizes[victim], pinned)
            self.lists[t].remove(victim)
            self.lists[dest].append(victim)

    def promote(self, us, t):
        moving = [u for u in us if self.where(u) != t]
        for u in moving:
            self.lists[self.where(u)].remove(u)
        self.make_room(t, sum(self.sizes[u] for u in moving), set(us))
        for u in us:
            if u in self.lists[t]:
                self.lists[t].remove(u)
            self.lists[t].append(u)

    def access(self, u):
        t = self.where(u)
        if t == "hot":
            self.count["hits"] += 1
            self.lists["hot"].remove(u)
            self.lists["hot"].append(u)
        elif t == "warm":
            self.count["warm"] += 1
            if self.sizes[u] <= self.cap["hot"]:
                self.promote([u], "hot")
            else:
                self.lists["warm"].remove(u)
                self.lists["warm"].append(u)
        else:
            self.count["cold"] += 1
            group = [g for g in self.groups.get(u, (u,)) if g != u] + [u]
            total = sum(self.sizes[g] for g in group)
            target = "hot" if total <= self.cap["hot"] else "warm" if total <= self.cap["warm"] else None
            if target is None:
                self.lists["cold"].remove(u)
                self.lists["cold"].append(u)
            else:
                self.promote(group, target)


pager_cases = st.integers(1, 6).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(1, 3), min_size=n, max_size=n),
        st.integers(0, 8),
        st.integers(0, 8),
        st.lists(st.integers(0, n - 1), min_size=0, max_size=40),
        st.lists(st.integers(0, n - 1), max_size=n),
        st.lists(st.floats(0, 1), min_size=n, max_size=n),
    )
)


@given(pager_cases)
def test_matches_reference_and_invariants(case):
    sizes, hot, warm, trace, group, scores = case
    n = len(sizes)
    units = [PagingUnit(i, (2 * i, 2 * i + 1), sizes[i]) for i in range(n)]
    groups = [sorted(set(group))] if len(set(group)) > 1 else []
    st_ = init_placement(scores, units, TierConfig(hot, warm), groups)
    ref_groups = {u: tuple(g) for g in groups for u in g}
    placement = {t.value: st_.tier_members(t) for t in Tier}
    ref = ReferencePager(sizes, hot, warm, ref_groups, placement)
    st_.check_invariants()
    for u in trace:
        was_cold = st_.tier[u] is Tier.COLD
        st_.access(u)
        ref.access(u)
        st_.check_invariants()
        for t in Tier:
            assert st_.tier_members(t) == ref.lists[t.value]
        if groups and u in groups[0] and was_cold:
            total = sum(sizes[g] for g in groups[0])
            if total <= max(hot, warm):
                # a cold fault moves the whole cluster group as one
                assert len({st_.tier[g] for g in groups[0]}) == 1
    s = st_.snapshot()
    assert (s.hits, s.warm_faults, s.cold_faults) == (ref.count["hits"], ref.count["warm"], ref.count["cold"])


@given(pager_cases)
def test_deterministic(case):
    sizes, hot, warm, trace, _, scores = case
    units = [PagingUnit(i, (i,), s) for i, s in enumerate(sizes)]

    def run():
        st_ = init_placement(scores, units, TierConfig(hot, warm))
        for u in trace:
            st_.access(u)
        return st_.snapshot()

    assert run() == run()


@pytest.mark.parametrize("items, length", [(4, 10), (3, 12)])
@pytest.mark.parametrize("capacity", [1, 2, 3])
def test_single_tier_lru_exhaustive(items, length, capacity):
    """With warm capacity 0 the hot tier is a textbook LRU cache.

    Items start cold and are interchangeable, so enumerating traces up to
    relabeling covers every trace of the given length.
    """
    if capacity >= items:
        pytest.skip("capacity holds every item")
    units = unit_sized(items)
    cfg = TierConfig(capacity, 0)

    def dfs(state, oracle, depth):
        if depth == length:
            return
        used = max(oracle["seen"], default=-1) + 1
        for x in range(min(used + 1, items)):
            s = state.clone()
            lru = OrderedDict(oracle["lru"])
            tier, _ = s.access(x)
            hit = x in lru
            if hit:
                lru.move_to_end(x)
            else:
                lru[x] = None
                if len(lru) > capacity:
                    lru.popitem(last=False)
            assert (tier is Tier.HOT) == hit
            assert s.tier_members(Tier.HOT) == list(lru)
            dfs(s, {"lru": lru, "seen": oracle["seen"] | {x}}, depth + 1)

    dfs(PagerState.cold_start(units, cfg), {"lru": OrderedDict(), "seen": set()}, 0)


def test_warm_up_bound_when_everything_fits_somewhere():
    units = layer_units(16)
    for hot in (0, 8, 24, 32):
        st_ = PagerState.cold_start(units, TierConfig(hot, 32 - hot))
        s = simulate(st_, flatten_trace(decode_trace(16, 50)), check=True)
        assert s.cold_faults <= len(units)


def test_cold_start_full_hot_tier_hit_rate():
    units = layer_units(16)
    st_ = PagerState.cold_start(units, TierConfig(32, 0))
    s = simulate(st_, flatten_trace(decode_trace(16, 270)))
    assert s.faults == len(units) and s.hit_rate > 0.996
