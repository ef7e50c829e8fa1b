"""Pager hit rate on a cyclic decode trace as the hot tier shrinks.

Each row gives the hot capacity in layers, the LRU pager's faults and hit rate,
and the hit rate of optimal offline replacement with the same capacity. The
optimum is an upper bound for any online policy.

    python3 scripts/pagesim_table.py --layers 16 --passes 270
"""

import argparse
import math

from layerplan.pager import (
    TierConfig,
    decode_trace,
    flatten_trace,
    init_placement,
    parse_subblock,
    pmi_clusters,
    simulate,
)


def optimal_hit_rate(seq, capacity):
    next_use, last = [0] * len(seq), {}
    for i in range(len(seq) - 1, -1, -1):
        next_use[i] = last.get(seq[i], math.inf)
        last[seq[i]] = i
    cache, nxt, hits = set(), {}, 0
    for i, u in enumerate(seq):
        if u in cache:
            hits += 1
        elif len(cache) >= capacity:
            cache.remove(max(cache, key=nxt.__getitem__))
        cache.add(u)
        nxt[u] = next_use[i]
    return hits / len(seq)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--layers", type=int, default=16)
    ap.add_argument("--passes", type=int, default=270)
    args = ap.parse_args()

    trace = decode_trace(args.layers, args.passes)
    accesses = flatten_trace(trace)
    units = pmi_clusters(trace, 0.05, {i: 1 for i in range(2 * args.layers)})
    print(f"{'hot layers':>10} {'warm faults':>12} {'cold faults':>12} {'hit rate':>9} {'optimal':>8}")
    for hot in range(args.layers, 0, -2):
        cfg = TierConfig(2 * hot, 2 * (args.layers - hot))
        state = init_placement(None, units, cfg)
        seq = [state.unit_of[parse_subblock(a)] for a in accesses]
        stats = simulate(state, accesses, check=True)
        best = optimal_hit_rate(seq, hot)
        print(f"{hot:>10} {stats.warm_faults:>12} {stats.cold_faults:>12} {stats.hit_rate:>9.4f} {best:>8.4f}")


if __name__ == "__main__":
    main()
