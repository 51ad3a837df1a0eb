"""Cyclic toy interaction logs where the next item is a fixed function of the current one."""
from __future__ import annotations

import numpy as np

from .data import InteractionLog, build_splits


def cyclic_patterns(n_items=30, n_patterns=5, seed=0):
    """Split items 1..n_items into ``n_patterns`` disjoint cycles in seeded random order."""
    rng = np.random.default_rng([seed, 0xC1C])
    perm = rng.permutation(np.arange(1, n_items + 1))
    return [list(map(int, c)) for c in np.array_split(perm, n_patterns)]


def cyclic_log(n_users=200, n_items=30, n_patterns=5, length=12, seed=0):
    """Each user walks one cycle from a random phase for ``length`` steps."""
    patterns = cyclic_patterns(n_items, n_patterns, seed)
    rng = np.random.default_rng([seed, 0x5E0])
    records = []
    for u in range(n_users):
        cycle = patterns[int(rng.integers(n_patterns))]
        phase = int(rng.integers(len(cycle)))
        for t in range(length):
            records.append((f"u{u:04d}", str(cycle[(phase + t) % len(cycle)]), 1000 * t))
    records.sort(key=lambda r: (r[0], r[2]))
    return InteractionLog(records)


def write_log(path, log_):
    with open(path, "w", encoding="utf-8") as fh:
        for u, i, t in log_.records:
            fh.write(f"{u}\t{i}\t{t}\n")


def cyclic_dataset(max_len=12, **kw):
    from .data import Dataset, log_stats

    log_ = cyclic_log(**kw)
    catalog, split = build_splits(log_, max_len)
    return Dataset(catalog, split, log_stats(log_))
