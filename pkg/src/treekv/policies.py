"""KV-cache eviction policies behind one behavioural contract.

The tree-cycle policy sweeps a cursor through the cache from oldest to
newest; at each over-capacity step it compares the averaged attention
scores of the two slots under the cursor and removes the lower one, which
yields a retained set that is sparse on the left and dense on the right.
A select-left variant ignores the scores entirely (ablation control).
Baselines: a sink-plus-recent sliding window in the style of StreamingLLM,
cumulative-score eviction in the style of H2O, and last-row eviction in the
style of TOVA.

All policies read the same ImportanceTracker, whose entries are evicted in
lockstep with cache slots.  One policy instance serves exactly one
(layer, head) stream; instances can be moved between threads, but never
shared.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .engine import AttentionStream, KVCache, ModelWeights
from .errors import (
    ConfigError,
    DimensionError,
    InvariantViolation,
    StateError,
)
from .trace import DecodeTrace, EvictionEvent, StepRecord

POLICY_SPECS = ("treekv", "treekv-left", "streaming", "h2o", "tova", "full")


@dataclass(frozen=True)
class ProtectedZones:
    """Never-evicted regions: the first n_sink and the last n_recent slots."""

    n_sink: int = 0
    n_recent: int = 0

    def __post_init__(self):
        if self.n_sink < 0 or self.n_recent < 0:
            raise ConfigError(
                f"zone sizes must be non-negative, got sink={self.n_sink} "
                f"recent={self.n_recent}"
            )

    @property
    def total(self) -> int:
        return self.n_sink + self.n_recent

    @classmethod
    def parse(cls, text: str | None) -> "ProtectedZones":
        """Parse the zone syntax "sink=4,recent=508"; empty means no zones."""
        if not text:
            return cls()
        values = {"sink": 0, "recent": 0}
        for part in text.split(","):
            key, _, raw = part.partition("=")
            key = key.strip()
            if key not in values or not raw.strip().lstrip("-").isdigit():
                raise ConfigError(f"bad zone syntax {text!r}, expected sink=N,recent=N")
            values[key] = int(raw)
        return cls(values["sink"], values["recent"])

    @classmethod
    def coerce(cls, zones) -> "ProtectedZones":
        if zones is None:
            return cls()
        if isinstance(zones, str):
            return cls.parse(zones)
        return zones

    def __str__(self) -> str:
        return f"sink={self.n_sink},recent={self.n_recent}"


class ImportanceTracker:
    """Parallel per-slot statistics: cumulative attention mass S and
    residency counts C (number of attention calls while resident)."""

    def __init__(self, reserve: int = 64):
        reserve = max(reserve, 1)
        self._s = np.zeros(reserve, dtype=np.float64)
        self._c = np.zeros(reserve, dtype=np.int64)
        self._n = 0

    @classmethod
    def from_arrays(cls, scores, counts=None) -> "ImportanceTracker":
        """Bootstrap a tracker from explicit S (and C, default all ones)."""
        scores = np.asarray(scores, dtype=np.float64)
        tracker = cls(reserve=max(len(scores), 1))
        tracker._s[: len(scores)] = scores
        if counts is None:
            tracker._c[: len(scores)] = 1
        else:
            counts = np.asarray(counts, dtype=np.int64)
            if counts.shape != scores.shape:
                raise DimensionError("S and C must have equal length")
            tracker._c[: len(scores)] = counts
        tracker._n = len(scores)
        return tracker

    def __len__(self) -> int:
        return self._n

    @property
    def S(self) -> np.ndarray:
        return self._s[: self._n]

    @property
    def C(self) -> np.ndarray:
        return self._c[: self._n]

    def extend(self) -> None:
        """Add a zero entry for a freshly appended slot."""
        if self._n == self._s.shape[0]:
            grown_s = np.zeros(2 * self._n, dtype=np.float64)
            grown_c = np.zeros(2 * self._n, dtype=np.int64)
            grown_s[: self._n] = self._s
            grown_c[: self._n] = self._c
            self._s, self._c = grown_s, grown_c
        self._s[self._n] = 0.0
        self._c[self._n] = 0
        self._n += 1

    def evict(self, index: int) -> None:
        if not 0 <= index < self._n:
            raise StateError(f"evict index {index} out of range for {self._n} entries")
        self._s[index : self._n - 1] = self._s[index + 1 : self._n].copy()
        self._c[index : self._n - 1] = self._c[index + 1 : self._n].copy()
        self._n -= 1


def update_scores(tracker: ImportanceTracker, row) -> ImportanceTracker:
    """Accumulate one attention row: S += row and C += 1 entrywise."""
    row = np.asarray(row, dtype=np.float64)
    if row.shape != (len(tracker),):
        raise DimensionError(
            f"attention row of length {row.shape} does not match the "
            f"{len(tracker)} tracked slots"
        )
    tracker._s[: tracker._n] += row
    tracker._c[: tracker._n] += 1
    return tracker


def average_scores(tracker: ImportanceTracker) -> np.ndarray:
    """Averaged attention mass per slot: S / C elementwise."""
    if len(tracker) and int(tracker.C.min()) < 1:
        raise InvariantViolation("tracker has a slot with zero residency count")
    return tracker.S / tracker.C


@dataclass
class TreeKVState:
    """Cursor state of the tree cycle.

    ``c`` is the number of slots the cursor sweeps: the cache capacity when
    no zones are configured, capacity minus the protected slots otherwise.
    """

    c: int
    mode: str = "score"  # "score" or "select-left"
    idx: int = 1  # 1-based cursor, always in 1..c

    def __post_init__(self):
        if self.c < 1:
            raise ConfigError(f"cursor range must cover at least one slot, got {self.c}")
        if self.mode not in ("score", "select-left"):
            raise ConfigError(f"unknown tree mode {self.mode!r}")
        if not 1 <= self.idx <= self.c:
            raise ConfigError(f"cursor {self.idx} outside 1..{self.c}")


def advance_idx(state: TreeKVState) -> TreeKVState:
    """Advance the cursor one cyclic step over 1..c."""
    if not 1 <= state.idx <= state.c:
        raise InvariantViolation(f"cursor {state.idx} outside 1..{state.c}")
    state.idx = (state.idx % state.c) + 1
    return state


def treekv_evict_step(
    cache: KVCache,
    tracker: ImportanceTracker,
    state: TreeKVState,
    zones: ProtectedZones | None = None,
) -> int:
    """One tree eviction on a cache that is exactly one slot over capacity.

    The eviction scope is the adjacent slot pair {idx, idx+1} (offset past
    the sink zone when zones are active).  In score mode the slot with the
    lower averaged attention mass goes, with ties falling to the left slot;
    in select-left mode the left slot always goes.  Removes the slot from
    the cache and the tracker and returns its 1-based index.
    """
    zones = ProtectedZones.coerce(zones)
    expected = zones.total + state.c + 1
    if len(cache) != expected:
        raise StateError(
            f"tree eviction needs exactly {expected} slots (one over capacity), "
            f"cache has {len(cache)}"
        )
    if len(tracker) != len(cache):
        raise DimensionError(
            f"tracker length {len(tracker)} does not match cache length {len(cache)}"
        )
    if not 1 <= state.idx <= state.c:
        raise InvariantViolation(f"cursor {state.idx} outside 1..{state.c}")
    left = zones.n_sink + state.idx  # 1-based
    if state.mode == "select-left":
        victim = left
    else:
        averaged = average_scores(tracker)
        victim = left + 1 if averaged[left - 1] > averaged[left] else left
    cache.evict(victim - 1)
    tracker.evict(victim - 1)
    return victim


def _evictable_range(cache_len: int, zones: ProtectedZones) -> tuple[int, int]:
    lo = zones.n_sink + 1
    hi = cache_len - zones.n_recent
    if lo > hi:
        raise ConfigError(
            f"no evictable slot: cache of {cache_len} cannot protect "
            f"sink={zones.n_sink} and recent={zones.n_recent}"
        )
    return lo, hi


def streaming_llm_evict(cache: KVCache, zones: ProtectedZones | None = None) -> int:
    """Evict the oldest slot outside the sink region (slot n_sink + 1).

    Removes the slot from the cache only; the caller keeps any tracker in
    sync.  Returns the 1-based victim index.
    """
    zones = ProtectedZones.coerce(zones)
    _evictable_range(len(cache), zones)
    victim = zones.n_sink + 1
    cache.evict(victim - 1)
    return victim


def h2o_evict(
    cache: KVCache,
    tracker: ImportanceTracker,
    zones: ProtectedZones | None = None,
) -> int:
    """Evict the minimum cumulative-score slot outside the zones
    (leftmost on ties).  Removes from cache and tracker."""
    zones = ProtectedZones.coerce(zones)
    if len(tracker) != len(cache):
        raise DimensionError(
            f"tracker length {len(tracker)} does not match cache length {len(cache)}"
        )
    lo, hi = _evictable_range(len(cache), zones)
    middle = tracker.S[lo - 1 : hi]
    victim = lo + int(np.argmin(middle))
    cache.evict(victim - 1)
    tracker.evict(victim - 1)
    return victim


def tova_evict(cache: KVCache, last_row, zones: ProtectedZones | None = None) -> int:
    """Evict the slot with minimum weight in the most recent attention row,
    outside the zones (leftmost on ties).  Removes from the cache only."""
    zones = ProtectedZones.coerce(zones)
    last_row = np.asarray(last_row, dtype=np.float64)
    if last_row.shape != (len(cache),):
        raise DimensionError(
            f"last row length {last_row.shape} does not match cache length {len(cache)}"
        )
    lo, hi = _evictable_range(len(cache), zones)
    victim = lo + int(np.argmin(last_row[lo - 1 : hi]))
    cache.evict(victim - 1)
    return victim


class EvictionRecord(NamedTuple):
    slot: int  # 1-based slot index that was removed
    position: int  # the removed token's original position
    cursor: int | None  # tree cursor used for this eviction, if any


class EvictionPolicy:
    """Contract: after a decode step, remove zero or one slot.

    ``evict`` is called only when the cache is over capacity; it must keep
    the tracker parallel to the cache and report what it removed.
    """

    spec = "?"

    def evict(
        self, cache: KVCache, tracker: ImportanceTracker, last_row: np.ndarray
    ) -> EvictionRecord | None:
        raise NotImplementedError

    @property
    def unbounded(self) -> bool:
        return False


class FullAttention(EvictionPolicy):
    spec = "full"

    def evict(self, cache, tracker, last_row):
        return None

    @property
    def unbounded(self) -> bool:
        return True


class TreeKV(EvictionPolicy):
    def __init__(self, capacity: int, zones=None, select_left: bool = False):
        zones = ProtectedZones.coerce(zones)
        if capacity < 2:
            raise ConfigError(f"tree eviction requires c >= 2, got {capacity}")
        cycle = capacity - zones.total
        if cycle < 1:
            raise ConfigError(
                f"zones require n_sink + n_recent < c "
                f"(got {zones} against c={capacity})"
            )
        self.capacity = capacity
        self.zones = zones
        self.state = TreeKVState(c=cycle, mode="select-left" if select_left else "score")

    @property
    def spec(self) -> str:
        return "treekv-left" if self.state.mode == "select-left" else "treekv"

    def evict(self, cache, tracker, last_row):
        cursor = self.state.idx
        positions = cache.positions.copy()
        victim = treekv_evict_step(cache, tracker, self.state, self.zones)
        advance_idx(self.state)
        return EvictionRecord(victim, int(positions[victim - 1]), cursor)


class StreamingLLM(EvictionPolicy):
    spec = "streaming"

    def __init__(self, capacity: int, zones=None):
        zones = ProtectedZones.coerce(zones)
        # At eviction time the cache holds capacity + 1 slots; one of them
        # must sit outside the protected regions.
        if capacity < zones.total:
            raise ConfigError(
                f"sliding window requires c >= n_sink + n_recent "
                f"(got {zones} against c={capacity})"
            )
        self.capacity = capacity
        self.zones = zones

    def evict(self, cache, tracker, last_row):
        positions = cache.positions.copy()
        victim = streaming_llm_evict(cache, self.zones)
        tracker.evict(victim - 1)
        return EvictionRecord(victim, int(positions[victim - 1]), None)


class H2O(EvictionPolicy):
    spec = "h2o"

    def __init__(self, capacity: int, zones=None):
        zones = ProtectedZones.coerce(zones)
        if capacity < zones.total:
            raise ConfigError(
                f"cumulative-score eviction requires c >= n_sink + n_recent "
                f"(got {zones} against c={capacity})"
            )
        self.capacity = capacity
        self.zones = zones

    def evict(self, cache, tracker, last_row):
        positions = cache.positions.copy()
        victim = h2o_evict(cache, tracker, self.zones)
        return EvictionRecord(victim, int(positions[victim - 1]), None)


class TOVA(EvictionPolicy):
    spec = "tova"

    def __init__(self, capacity: int, zones=None):
        zones = ProtectedZones.coerce(zones)
        if capacity < zones.total:
            raise ConfigError(
                f"last-row eviction requires c >= n_sink + n_recent "
                f"(got {zones} against c={capacity})"
            )
        self.capacity = capacity
        self.zones = zones

    def evict(self, cache, tracker, last_row):
        positions = cache.positions.copy()
        victim = tova_evict(cache, last_row, self.zones)
        tracker.evict(victim - 1)
        return EvictionRecord(victim, int(positions[victim - 1]), None)


def make_policy(spec: str, capacity: int, zones=None) -> EvictionPolicy:
    """Instantiate a fresh policy for one (layer, head) stream."""
    if spec == "treekv":
        return TreeKV(capacity, zones)
    if spec == "treekv-left":
        return TreeKV(capacity, zones, select_left=True)
    if spec == "streaming":
        return StreamingLLM(capacity, zones)
    if spec == "h2o":
        return H2O(capacity, zones)
    if spec == "tova":
        return TOVA(capacity, zones)
    if spec == "full":
        return FullAttention()
    raise ConfigError(f"unknown policy {spec!r}, expected one of {', '.join(POLICY_SPECS)}")


def decode_with_policy(
    weights: ModelWeights,
    inputs,
    policy_spec: str,
    capacity: int,
    zones=None,
    *,
    stream_seed: int | None = None,
    token_ids: list[int] | None = None,
    record_rows: bool = True,
    record_values: bool = True,
    record_outputs: bool = False,
) -> DecodeTrace:
    """Run the full decode loop over every (layer, head) stream.

    Per step and stream: project, append, attend with re-assigned
    positions, accumulate scores, then evict if the cache is over capacity.
    Returns the trace of attention rows, retained positions and eviction
    events.
    """
    dims = weights.dims
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != dims.d_model:
        raise DimensionError(
            f"inputs must have shape (T, {dims.d_model}), got {inputs.shape}"
        )
    seq_len = inputs.shape[0]
    zones = ProtectedZones.coerce(zones)
    if policy_spec != "full" and capacity < 2:
        raise ConfigError(f"decoding requires c >= 2, got {capacity}")

    unbounded = policy_spec == "full"
    cache_capacity = None if unbounded else capacity
    reserve = seq_len if unbounded else capacity + 1
    streams, trackers, policies = [], [], []
    for layer in range(dims.layers):
        for head in range(dims.heads):
            streams.append(
                AttentionStream(weights, layer, head, cache_capacity, max(reserve, 1))
            )
            trackers.append(ImportanceTracker(reserve=max(reserve, 1)))
            policies.append(make_policy(policy_spec, capacity, zones))

    trace = DecodeTrace(
        policy=policy_spec,
        capacity=capacity,
        zones=str(zones),
        seq_len=seq_len,
        dims=dims,
        model_seed=weights.seed,
        stream_seed=stream_seed,
        token_ids=list(token_ids) if token_ids is not None else None,
    )
    for step in range(1, seq_len + 1):
        x = inputs[step - 1]
        events: list[EvictionEvent] = []
        retained = [[None] * dims.heads for _ in range(dims.layers)]
        rows = [[None] * dims.heads for _ in range(dims.layers)] if record_rows else None
        values = [[None] * dims.heads for _ in range(dims.layers)] if record_values else None
        outputs = [[None] * dims.heads for _ in range(dims.layers)] if record_outputs else None
        index = 0
        for layer in range(dims.layers):
            for head in range(dims.heads):
                stream, tracker, policy = streams[index], trackers[index], policies[index]
                index += 1
                row, output, value = stream.step(x, step - 1)
                tracker.extend()
                update_scores(tracker, row)
                if not policy.unbounded and len(stream.cache) > capacity:
                    record = policy.evict(stream.cache, tracker, row)
                    if record is None:
                        raise InvariantViolation(
                            f"policy {policy_spec} declined to evict an "
                            f"over-capacity cache at step {step}"
                        )
                    events.append(
                        EvictionEvent(step, layer, head, record.position, record.cursor)
                    )
                if not policy.unbounded and len(stream.cache) > capacity:
                    raise InvariantViolation(
                        f"stream ({layer}, {head}) holds {len(stream.cache)} slots "
                        f"after eviction at step {step}, capacity {capacity}"
                    )
                retained[layer][head] = stream.cache.positions.tolist()
                if record_rows:
                    rows[layer][head] = row
                if record_values:
                    values[layer][head] = value
                if record_outputs:
                    outputs[layer][head] = output
        trace.steps.append(StepRecord(step, events, retained, rows, values, outputs))
    return trace
