"""Small builders shared across test modules."""

from __future__ import annotations

import numpy as np

from treekv import ImportanceTracker, KVCache, update_scores


def cache_with_positions(positions, d_head=4, seed=0, capacity=None):
    """Cache holding random key/value vectors at the given original positions."""
    rng = np.random.default_rng(seed)
    cache = KVCache(d_head, capacity=capacity, reserve=len(positions) + 1)
    for position in positions:
        cache.append(rng.normal(size=d_head), rng.normal(size=d_head), position)
    return cache


def staged_tracker(rows):
    """Tracker built through the public extend/update path, one row per step."""
    tracker = ImportanceTracker()
    for row in rows:
        tracker.extend()
        update_scores(tracker, np.asarray(row, dtype=np.float64))
    return tracker
