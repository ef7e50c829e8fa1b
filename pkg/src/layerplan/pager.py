"""Three-tier weight residency simulator.

Sub-blocks (the attention group and the FFN group of each layer) are grouped
into atomic paging units by co-activation: pointwise mutual information
between per-step access indicators, with edges at ``PMI >= threshold`` and
connected components as units. Units live in one of three tiers:

* hot  (device memory, bounded)
* warm (host memory, bounded)
* cold (storage, unbounded)

Each bounded tier is an LRU list. A hot access is a hit. A warm access
promotes the unit to hot. A cold access promotes the unit and every unit in
its cluster group. Room is made by demoting LRU-tail units one tier down
(hot -> warm -> cold).
"""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_PMI_THRESHOLD = 0.05
GROUPS = ("attn", "ffn")


class PagerError(ValueError):
    pass


class Tier(str, Enum):
    HOT = "hot"
    WARM = "warm"
    COLD = "cold"


TIER_ORDER = (Tier.HOT, Tier.WARM, Tier.COLD)


def subblock_id(layer: int, group: str) -> int:
    return 2 * layer + GROUPS.index(group)


def subblock_name(sid: int) -> str:
    return f"L{sid // 2}.{GROUPS[sid % 2]}"


def parse_subblock(name: str) -> int:
    try:
        layer, group = name.split(".")
        if not layer.startswith("L"):
            raise ValueError
        return subblock_id(int(layer[1:]), group)
    except ValueError:
        raise PagerError(f"bad sub-block name {name!r}; expected 'L<i>.attn' or 'L<i>.ffn'") from None


@dataclass(frozen=True)
class TierConfig:
    hot_capacity_bytes: int
    warm_capacity_bytes: int
    latency: Mapping[str, int] = field(
        default_factory=lambda: {"hot": 0, "warm": 1, "cold": 10}
    )

    def __post_init__(self):
        if self.hot_capacity_bytes < 0 or self.warm_capacity_bytes < 0:
            raise PagerError("tier capacities must be >= 0")

    def capacity(self, tier: Tier) -> float:
        if tier is Tier.HOT:
            return self.hot_capacity_bytes
        if tier is Tier.WARM:
            return self.warm_capacity_bytes
        return math.inf


@dataclass(frozen=True)
class PagingUnit:
    uid: int
    members: tuple[int, ...]  # sub-block ids
    nbytes: int

    @property
    def layers(self) -> tuple[int, ...]:
        return tuple(sorted({m // 2 for m in self.members}))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(subblock_name(m) for m in self.members)


# ---------------------------------------------------------------------------
# co-activation clustering


def _normalize_trace(trace: Sequence[Iterable]) -> list[frozenset[int]]:
    steps = []
    for step in trace:
        steps.append(frozenset(parse_subblock(s) if isinstance(s, str) else int(s) for s in step))
    return steps


def pmi(trace: Sequence[Iterable], a: int, b: int) -> float:
    """Maximum-likelihood PMI of two sub-blocks with a one-step window.

    ``-inf`` when the pair never co-occurs (including when either is never
    accessed).
    """
    steps = _normalize_trace(trace)
    if not steps:
        raise PagerError("trace is empty")
    n_a = sum(a in s for s in steps)
    n_b = sum(b in s for s in steps)
    n_ab = sum(a in s and b in s for s in steps)
    if n_ab == 0:
        return -math.inf
    # P(ab) / (P(a) P(b)) = n_ab * S / (n_a * n_b), formed from exact integers
    return math.log(n_ab * len(steps) / (n_a * n_b))


def pmi_components(
    trace: Sequence[Iterable], threshold: float, universe: Iterable[int] | None = None
) -> list[tuple[int, ...]]:
    """Connected components of the ``PMI >= threshold`` graph, ordered by smallest member."""
    if not math.isfinite(threshold):
        raise PagerError(f"PMI threshold must be finite, got {threshold}")
    steps = _normalize_trace(trace)
    if not steps:
        raise PagerError("trace is empty")
    ids = sorted(set().union(*steps) | set(universe or ()))
    parent = {i: i for i in ids}

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    count = {i: sum(i in s for s in steps) for i in ids}
    S = len(steps)
    for x, a in enumerate(ids):
        for b in ids[x + 1 :]:
            n_ab = sum(a in s and b in s for s in steps)
            if n_ab and math.log(n_ab * S / (count[a] * count[b])) >= threshold:
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
    comps: dict[int, list[int]] = {}
    for i in ids:
        comps.setdefault(find(i), []).append(i)
    return sorted((tuple(c) for c in comps.values()), key=lambda c: c[0])


def pmi_clusters(
    trace: Sequence[Iterable],
    threshold: float = DEFAULT_PMI_THRESHOLD,
    sizes: Mapping[int, int] | None = None,
    num_subblocks: int | None = None,
) -> list[PagingUnit]:
    """Paging units from a sub-block access trace.

    Sub-blocks listed in ``sizes`` or below ``num_subblocks`` but absent from
    the trace become singleton units. Unit bytes sum member sizes (default 1).
    """
    universe = set(sizes or ())
    if num_subblocks is not None:
        universe |= set(range(num_subblocks))
    comps = pmi_components(trace, threshold, universe)
    sizes = sizes or {}
    return [
        PagingUnit(uid, comp, sum(int(sizes.get(m, 1)) for m in comp)) for uid, comp in enumerate(comps)
    ]


def decode_trace(layers: int, passes: int) -> list[frozenset[str]]:
    """Cyclic decode: each step runs one layer (its attention then FFN sub-block)."""
    return [frozenset({f"L{i}.attn", f"L{i}.ffn"}) for _ in range(passes) for i in range(layers)]


def flatten_trace(trace: Sequence[Iterable[str]]) -> list[str]:
    """Per-access order of a step trace (attention before FFN within a layer)."""
    return [name for step in trace for name in sorted(step, key=parse_subblock)]


# ---------------------------------------------------------------------------
# residency


@dataclass(frozen=True)
class PagerStats:
    hits: int
    warm_faults: int
    cold_faults: int
    promotions: int
    evictions: int
    residency: tuple[tuple[int, str], ...] = ()

    @property
    def faults(self) -> int:
        return self.warm_faults + self.cold_faults

    @property
    def accesses(self) -> int:
        return self.hits + self.faults

    @property
    def no_accesses(self) -> bool:
        return self.accesses == 0

    @property
    def hit_rate(self) -> float:
        return 1.0 if self.no_accesses else self.hits / self.accesses

    def to_json(self) -> dict:
        return {
            "hits": self.hits,
            "faults": self.faults,
            "warm_faults": self.warm_faults,
            "cold_faults": self.cold_faults,
            "hit_rate": self.hit_rate,
            "promotions": self.promotions,
            "evictions": self.evictions,
            "no_accesses": self.no_accesses,
        }


def hit_rate(hits: int, faults: int) -> float:
    total = hits + faults
    return 1.0 if total == 0 else hits / total


class PagerState:
    """Residency map, per-tier LRU lists (last = most recent) and counters.

    Single-mutator: callers serialize ``access``/``prefetch``; ``snapshot``
    returns an immutable copy.
    """

    def __init__(
        self,
        units: Sequence[PagingUnit],
        cfg: TierConfig,
        groups: Iterable[Iterable[int]] | None = None,
    ):
        self.cfg = cfg
        self.units = {u.uid: u for u in units}
        if len(self.units) != len(units):
            raise PagerError("duplicate unit ids")
        self.unit_of: dict[int, int] = {}
        for u in units:
            for m in u.members:
                if m in self.unit_of:
                    raise PagerError(f"sub-block {subblock_name(m)} belongs to two units")
                self.unit_of[m] = u.uid
        self.group_of: dict[int, tuple[int, ...]] = {uid: (uid,) for uid in self.units}
        for g in groups or ():
            g = tuple(sorted(set(g)))
            for uid in g:
                if uid not in self.units:
                    raise PagerError(f"unknown unit {uid} in cluster group")
                self.group_of[uid] = g
        self.tier: dict[int, Tier] = {}
        self.lru: dict[Tier, OrderedDict[int, None]] = {t: OrderedDict() for t in TIER_ORDER}
        self.used: dict[Tier, int] = {t: 0 for t in TIER_ORDER}
        self.hits = self.warm_faults = self.cold_faults = 0
        self.promotions = self.evictions = 0
        self.warnings: list[str] = []

    @classmethod
    def cold_start(
        cls, units: Sequence[PagingUnit], cfg: TierConfig, groups: Iterable[Iterable[int]] | None = None
    ) -> "PagerState":
        """Every unit starts in cold storage (LRU order = unit id order)."""
        state = cls(units, cfg, groups)
        for u in sorted(state.units):
            state._put(u, Tier.COLD)
        return state

    def clone(self) -> "PagerState":
        other = object.__new__(PagerState)
        other.__dict__.update(self.__dict__)
        other.tier = dict(self.tier)
        other.lru = {t: OrderedDict(q) for t, q in self.lru.items()}
        other.used = dict(self.used)
        other.warnings = list(self.warnings)
        return other

    # -- placement helpers -------------------------------------------------

    def _put(self, uid: int, tier: Tier) -> None:
        old = self.tier.get(uid)
        if old is not None:
            del self.lru[old][uid]
            self.used[old] -= self.units[uid].nbytes
        self.tier[uid] = tier
        self.lru[tier][uid] = None
        self.used[tier] += self.units[uid].nbytes

    def _free(self, tier: Tier) -> float:
        return self.cfg.capacity(tier) - self.used[tier]

    def _make_room(self, tier: Tier, need: int, pinned: set[int]) -> None:
        """Demote LRU-tail units of ``tier`` (never ``pinned`` ones) until ``need`` bytes are free."""
        below = TIER_ORDER[TIER_ORDER.index(tier) + 1]
        while self._free(tier) < need:
            victim = next((u for u in self.lru[tier] if u not in pinned), None)
            if victim is None:
                raise PagerError(f"cannot free {need} bytes in {tier.value}")
            size = self.units[victim].nbytes
            dest = below if size <= self.cfg.capacity(below) else Tier.COLD
            if dest is not Tier.COLD:
                self._make_room(dest, size, pinned)
            self._put(victim, dest)
            self.evictions += 1

    def _promote(self, uids: Sequence[int], tier: Tier) -> None:
        moving = [u for u in uids if self.tier[u] is not tier]
        # vacate the old slots first so a promotion swaps rather than cascades
        for u in moving:
            old = self.tier.pop(u)
            del self.lru[old][u]
            self.used[old] -= self.units[u].nbytes
        need = sum(self.units[u].nbytes for u in moving)
        self._make_room(tier, need, set(uids))
        self.promotions += len(moving)
        for u in uids:
            self._put(u, tier)  # also refreshes recency of already-resident members

    def _target(self, nbytes: int, below: Tier) -> Tier | None:
        """Highest tier above ``below`` whose capacity can hold ``nbytes`` at all."""
        for t in TIER_ORDER[: TIER_ORDER.index(below)]:
            if nbytes <= self.cfg.capacity(t):
                return t
        return None

    # -- public operations -------------------------------------------------

    def unit(self, uid: int) -> PagingUnit:
        if uid not in self.units:
            raise PagerError(f"unknown unit {uid}")
        return self.units[uid]

    def access(self, uid: int) -> tuple[Tier, int]:
        self.unit(uid)
        served = self.tier[uid]
        if served is Tier.HOT:
            self.hits += 1
            self.lru[Tier.HOT].move_to_end(uid)
        elif served is Tier.WARM:
            self.warm_faults += 1
            if self.units[uid].nbytes <= self.cfg.hot_capacity_bytes:
                self._promote([uid], Tier.HOT)
            else:
                self.lru[Tier.WARM].move_to_end(uid)
        else:
            self.cold_faults += 1
            group = [u for u in self.group_of[uid] if u != uid] + [uid]  # accessed unit ends MRU
            target = self._target(sum(self.units[u].nbytes for u in group), Tier.COLD)
            if target is None:
                self.lru[Tier.COLD].move_to_end(uid)
            else:
                self._promote(group, target)
        return served, int(self.cfg.latency[served.value])

    def access_subblock(self, name: str | int) -> tuple[Tier, int]:
        sid = parse_subblock(name) if isinstance(name, str) else int(name)
        if sid not in self.unit_of:
            raise PagerError(f"unknown sub-block {subblock_name(sid)}")
        return self.access(self.unit_of[sid])

    def prefetch(self, uid: int) -> None:
        """Move a unit (and its cluster group) to hot without touching hit/fault counters."""
        self.unit(uid)
        group = [u for u in self.group_of[uid] if u != uid] + [uid]
        if sum(self.units[u].nbytes for u in group) <= self.cfg.hot_capacity_bytes:
            self._promote(group, Tier.HOT)

    def check_invariants(self) -> None:
        for t in TIER_ORDER:
            members = set(self.lru[t])
            if members != {u for u, tt in self.tier.items() if tt is t}:
                raise AssertionError(f"LRU list of {t.value} out of sync with residency")
            used = sum(self.units[u].nbytes for u in members)
            if used != self.used[t] or used > self.cfg.capacity(t):
                raise AssertionError(f"{t.value} holds {used} bytes, capacity {self.cfg.capacity(t)}")
        if set(self.tier) != set(self.units):
            raise AssertionError("some unit has no tier")

    def stats(self) -> dict:
        return self.snapshot().to_json()

    def snapshot(self) -> PagerStats:
        return PagerStats(
            self.hits,
            self.warm_faults,
            self.cold_faults,
            self.promotions,
            self.evictions,
            tuple(sorted((u, t.value) for u, t in self.tier.items())),
        )

    def tier_members(self, tier: Tier) -> list[int]:
        """Units in ``tier`` from least to most recently used."""
        return list(self.lru[tier])


def unit_importance(unit: PagingUnit, scores: Sequence[float]) -> float:
    return max(scores[layer] for layer in unit.layers)


def init_placement(
    scores: Sequence[float] | None,
    units: Sequence[PagingUnit],
    cfg: TierConfig,
    groups: Iterable[Iterable[int]] | None = None,
) -> PagerState:
    """Place units by descending importance: fill hot, then warm, rest cold.

    ``scores`` are normalized per-layer importances (a profile's
    ``normalized_scores``); ``None`` treats all layers as equal. Ties go to the
    lower unit id. Within each tier the most important unit is most recent.
    """
    state = PagerState(units, cfg, groups)
    if scores is None:
        order = sorted(state.units)
    else:
        order = sorted(state.units, key=lambda u: (-unit_importance(state.units[u], scores), u))
    free = {Tier.HOT: cfg.hot_capacity_bytes, Tier.WARM: cfg.warm_capacity_bytes}
    placed: dict[Tier, list[int]] = {t: [] for t in TIER_ORDER}
    for uid in order:
        nbytes = state.units[uid].nbytes
        if nbytes > cfg.hot_capacity_bytes + cfg.warm_capacity_bytes:
            msg = f"unit {uid} ({nbytes} bytes) exceeds hot+warm capacity; placed cold"
            state.warnings.append(msg)
            log.warning(msg)
            placed[Tier.COLD].append(uid)
            continue
        for t in (Tier.HOT, Tier.WARM):
            if nbytes <= free[t]:
                free[t] -= nbytes
                placed[t].append(uid)
                break
        else:
            placed[Tier.COLD].append(uid)
    for t in TIER_ORDER:
        for uid in reversed(placed[t]):
            state._put(uid, t)
    return state


def simulate(state: PagerState, accesses: Iterable[str | int], check: bool = False) -> PagerStats:
    for a in accesses:
        state.access_subblock(a)
        if check:
            state.check_invariants()
    return state.snapshot()


def layer_units(layers: int, subblock_bytes: int | Sequence[int] = 1) -> list[PagingUnit]:
    """One unit per layer holding both sub-blocks (what clustering yields on a decode trace)."""
    sizes = [subblock_bytes] * (2 * layers) if isinstance(subblock_bytes, (int, np.integer)) else list(subblock_bytes)
    return [PagingUnit(i, (2 * i, 2 * i + 1), int(sizes[2 * i] + sizes[2 * i + 1])) for i in range(layers)]
