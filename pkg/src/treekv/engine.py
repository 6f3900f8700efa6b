"""Deterministic multi-head attention micro-engine with an evictable KV cache.

The engine runs one independent attention stream per (layer, head) pair.
Each stream projects incoming d_model vectors to d_head queries, keys and
values, appends the key/value pair to an explicit cache, and computes
softmax attention scaled by sqrt(d_head).  There are no feed-forward or
normalization layers, and every (layer, head) stream reads the same
embedded input sequence: eviction behaviour depends only on attention, and
the reduced surface keeps reference computations exact.  The optional
embedding table and output projection exist solely so end-to-end smoke
runs can produce logits.

Position handling follows the re-assignment convention of sliding-window
decoders: a rotary-style phase rotation is keyed by the slot index a key
currently occupies in the cache, not by the token's original position, and
it is applied lazily at attention time.  Stored keys are never re-encoded;
evicting a slot shifts the survivors left, and the next attention call
sees contiguous encoding positions 0..len-1.

Weight file format (version 1)
------------------------------
Little-endian throughout::

    magic   4 bytes  "TKVW"
    version u16      1
    layers  u32
    heads   u32
    d_model u32
    d_head  u32
    vocab   u32
    seed    u64

followed by matrices as row-major 32-bit floats:

* for each layer, for each head: W_Q, W_K, W_V, each (d_model, d_head);
* if vocab > 0: the embedding table (vocab, d_model) and the output
  projection (layers * heads * d_head, vocab).

Matrix entries are normal variates from ``treekv.rng`` drawn row-major from
the substream ``stream_seed(seed, tag)``.  Tags: W_Q/W_K/W_V of (layer,
head) use ``16 + 3 * (layer * heads + head) + kind`` with kind 0/1/2 for
Q/K/V; the embedding table uses tag 1; the output projection uses tag 2.
Scales: 1/sqrt(d_model) for the projection matrices, 1.0 for the embedding
table, 1/sqrt(layers * heads * d_head) for the output projection.
Synthetic input streams (tags 3 and 4) use the same recurrence, so a single
seed makes a whole experiment reproducible.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DimensionError, InputError, OrderingError, StateError
from .rng import NormalStream, stream_seed

_MAGIC = b"TKVW"
_FORMAT_VERSION = 1

# Substream tags; documented in the module docstring.
_TAG_EMBEDDING = 1
_TAG_OUTPUT_PROJ = 2
TAG_TOKEN_STREAM = 3
TAG_EMBED_STREAM = 4
_TAG_MATRIX_BASE = 16

ROPE_BASE = 10000.0


@dataclass(frozen=True)
class ModelDims:
    layers: int
    heads: int
    d_model: int
    d_head: int
    vocab: int = 0

    def validate(self) -> None:
        for name in ("layers", "heads", "d_model", "d_head"):
            value = getattr(self, name)
            if not 1 <= value < 2**32:
                raise DimensionError(f"{name} must be in [1, 2**32), got {value}")
        if not 0 <= self.vocab < 2**32:
            raise DimensionError(f"vocab must be in [0, 2**32), got {self.vocab}")

    @property
    def feature_dim(self) -> int:
        """Length of the concatenated per-stream outputs fed to the logit head."""
        return self.layers * self.heads * self.d_head


class ModelWeights:
    """Per-(layer, head) projection matrices plus the optional logit head.

    Matrices are stored as float32 exactly as written to disk; arithmetic
    promotes to float64 at use time.  Instances are read-only after
    construction and safe to share across threads.
    """

    def __init__(
        self,
        dims: ModelDims,
        seed: int,
        wq: list[list[np.ndarray]],
        wk: list[list[np.ndarray]],
        wv: list[list[np.ndarray]],
        embedding: np.ndarray | None = None,
        output_proj: np.ndarray | None = None,
    ):
        self.dims = dims
        self.seed = seed
        self.wq = wq
        self.wk = wk
        self.wv = wv
        self.embedding = embedding
        self.output_proj = output_proj

    def logits(self, features: np.ndarray) -> np.ndarray:
        """Logit row for one step from the concatenated stream outputs."""
        if self.output_proj is None:
            raise StateError("model has no output projection (vocab = 0)")
        features = np.asarray(features, dtype=np.float64)
        if features.shape != (self.dims.feature_dim,):
            raise DimensionError(
                f"expected {self.dims.feature_dim} features, got {features.shape}"
            )
        return features @ self.output_proj


def _matrix_tag(dims: ModelDims, layer: int, head: int, kind: int) -> int:
    return _TAG_MATRIX_BASE + 3 * (layer * dims.heads + head) + kind


def _draw_matrix(seed: int, tag: int, rows: int, cols: int, scale: float) -> np.ndarray:
    stream = NormalStream(stream_seed(seed, tag))
    flat = np.array(stream.normals(rows * cols), dtype=np.float64) * scale
    return flat.reshape(rows, cols).astype(np.float32)


def generate_weights(seed: int, dims: ModelDims) -> ModelWeights:
    """Fill a weight set from the pinned recurrence; pure in (seed, dims)."""
    dims.validate()
    scale = 1.0 / math.sqrt(dims.d_model)
    wq, wk, wv = [], [], []
    for layer in range(dims.layers):
        row_q, row_k, row_v = [], [], []
        for head in range(dims.heads):
            for kind, bucket in enumerate((row_q, row_k, row_v)):
                tag = _matrix_tag(dims, layer, head, kind)
                bucket.append(_draw_matrix(seed, tag, dims.d_model, dims.d_head, scale))
        wq.append(row_q)
        wk.append(row_k)
        wv.append(row_v)
    embedding = output_proj = None
    if dims.vocab > 0:
        embedding = _draw_matrix(seed, _TAG_EMBEDDING, dims.vocab, dims.d_model, 1.0)
        output_proj = _draw_matrix(
            seed,
            _TAG_OUTPUT_PROJ,
            dims.feature_dim,
            dims.vocab,
            1.0 / math.sqrt(dims.feature_dim),
        )
    return ModelWeights(dims, seed & ((1 << 64) - 1), wq, wk, wv, embedding, output_proj)


def save_weights(weights: ModelWeights, path: str) -> None:
    dims = weights.dims
    header = struct.pack(
        "<4sHIIIIIQ",
        _MAGIC,
        _FORMAT_VERSION,
        dims.layers,
        dims.heads,
        dims.d_model,
        dims.d_head,
        dims.vocab,
        weights.seed,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for layer in range(dims.layers):
            for head in range(dims.heads):
                for matrix in (
                    weights.wq[layer][head],
                    weights.wk[layer][head],
                    weights.wv[layer][head],
                ):
                    fh.write(matrix.astype("<f4").tobytes())
        if dims.vocab > 0:
            fh.write(weights.embedding.astype("<f4").tobytes())
            fh.write(weights.output_proj.astype("<f4").tobytes())


def load_weights(path: str) -> ModelWeights:
    with open(path, "rb") as fh:
        blob = fh.read()
    head_size = struct.calcsize("<4sHIIIIIQ")
    if len(blob) < head_size:
        raise InputError(f"weight file {path} is truncated")
    magic, version, layers, heads, d_model, d_head, vocab, seed = struct.unpack(
        "<4sHIIIIIQ", blob[:head_size]
    )
    if magic != _MAGIC:
        raise InputError(f"bad magic {magic!r} in {path}, expected {_MAGIC!r}")
    if version != _FORMAT_VERSION:
        raise InputError(f"unsupported weight format version {version}")
    dims = ModelDims(layers, heads, d_model, d_head, vocab)
    dims.validate()
    offset = head_size

    def take(rows, cols):
        nonlocal offset
        count = rows * cols
        end = offset + 4 * count
        if end > len(blob):
            raise InputError(f"weight file {path} is truncated")
        matrix = np.frombuffer(blob[offset:end], dtype="<f4").reshape(rows, cols)
        offset = end
        return matrix.astype(np.float32)

    wq, wk, wv = [], [], []
    for _ in range(layers):
        row_q, row_k, row_v = [], [], []
        for _ in range(heads):
            row_q.append(take(d_model, d_head))
            row_k.append(take(d_model, d_head))
            row_v.append(take(d_model, d_head))
        wq.append(row_q)
        wk.append(row_k)
        wv.append(row_v)
    embedding = output_proj = None
    if vocab > 0:
        embedding = take(vocab, d_model)
        output_proj = take(dims.feature_dim, vocab)
    if offset != len(blob):
        raise InputError(f"weight file {path} has {len(blob) - offset} trailing bytes")
    return ModelWeights(dims, seed, wq, wk, wv, embedding, output_proj)


class ProjectedStep(NamedTuple):
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray


def project(x, weights: ModelWeights, layer: int, head: int) -> ProjectedStep:
    """Project one d_model input vector to this head's (q, k, v)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (weights.dims.d_model,):
        raise DimensionError(
            f"input length {x.shape} does not match d_model {weights.dims.d_model}"
        )
    return ProjectedStep(
        x @ weights.wq[layer][head],
        x @ weights.wk[layer][head],
        x @ weights.wv[layer][head],
    )


@dataclass(frozen=True)
class CacheSlot:
    key: np.ndarray
    value: np.ndarray
    original_position: int


class KVCache:
    """Ordered key/value slots for one (layer, head) stream.

    Holds at most capacity + 1 slots (the transient over-capacity state
    between an append and the following eviction).  Original positions are
    strictly increasing; survivors are never permuted.  Tracker entries in
    ``treekv.policies`` stay parallel to the slots by construction, so the
    slot index doubles as the tracker back-reference.
    """

    def __init__(self, d_head: int, capacity: int | None = None, reserve: int | None = None):
        if capacity is not None and capacity < 1:
            raise StateError(f"capacity must be >= 1, got {capacity}")
        if reserve is None:
            reserve = capacity + 1 if capacity is not None else 64
        reserve = max(reserve, 1)
        self.capacity = capacity
        self._keys = np.zeros((reserve, d_head), dtype=np.float64)
        self._values = np.zeros((reserve, d_head), dtype=np.float64)
        self._positions = np.zeros(reserve, dtype=np.int64)
        self._n = 0

    def __len__(self) -> int:
        return self._n

    @property
    def d_head(self) -> int:
        return self._keys.shape[1]

    @property
    def positions(self) -> np.ndarray:
        return self._positions[: self._n]

    def keys(self) -> np.ndarray:
        return self._keys[: self._n]

    def values(self) -> np.ndarray:
        return self._values[: self._n]

    @property
    def slots(self) -> list[CacheSlot]:
        return [
            CacheSlot(self._keys[i], self._values[i], int(self._positions[i]))
            for i in range(self._n)
        ]

    def _grow(self) -> None:
        new = max(8, 2 * self._keys.shape[0])
        for name in ("_keys", "_values"):
            old = getattr(self, name)
            fresh = np.zeros((new, old.shape[1]), dtype=np.float64)
            fresh[: self._n] = old[: self._n]
            setattr(self, name, fresh)
        positions = np.zeros(new, dtype=np.int64)
        positions[: self._n] = self._positions[: self._n]
        self._positions = positions

    def append(self, key, value, original_position: int) -> "KVCache":
        key = np.asarray(key, dtype=np.float64)
        value = np.asarray(value, dtype=np.float64)
        if key.shape != (self.d_head,) or value.shape != (self.d_head,):
            raise DimensionError(
                f"key/value must have length {self.d_head}, "
                f"got {key.shape} and {value.shape}"
            )
        if self._n > 0 and original_position <= self._positions[self._n - 1]:
            raise OrderingError(
                f"original_position {original_position} is not greater than the "
                f"last slot's position {int(self._positions[self._n - 1])}"
            )
        if self.capacity is not None and self._n + 1 > self.capacity + 1:
            raise StateError("append would exceed the capacity + 1 headroom")
        if self._n == self._keys.shape[0]:
            self._grow()
        self._keys[self._n] = key
        self._values[self._n] = value
        self._positions[self._n] = original_position
        self._n += 1
        return self

    def evict(self, index: int) -> None:
        """Remove the 0-based slot, shifting survivors left."""
        if not 0 <= index < self._n:
            raise StateError(f"evict index {index} out of range for {self._n} slots")
        tail = slice(index + 1, self._n)
        self._keys[index : self._n - 1] = self._keys[tail].copy()
        self._values[index : self._n - 1] = self._values[tail].copy()
        self._positions[index : self._n - 1] = self._positions[tail].copy()
        self._n -= 1


def _attend_arrays(q: np.ndarray, keys: np.ndarray, values: np.ndarray):
    if q.shape != (keys.shape[1],):
        raise DimensionError(f"query shape {q.shape} does not match d_head {keys.shape[1]}")
    logits = keys @ q / math.sqrt(keys.shape[1])
    shifted = np.exp(logits - logits.max())
    row = shifted / shifted.sum()
    return row, row @ values


def attend(q, cache: KVCache):
    """Softmax attention of the query over the cache's raw stored keys.

    Position encoding is the caller's responsibility (see apply_positions);
    this function never rotates anything.  Returns the attention row over
    all slots and the weighted value sum.
    """
    if len(cache) == 0:
        raise StateError("attend requires a non-empty cache")
    return _attend_arrays(np.asarray(q, dtype=np.float64), cache.keys(), cache.values())


# Memoized rotary tables, keyed by d_head and grown on demand.
_rope_tables: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _rope_table(d_head: int, upto: int) -> tuple[np.ndarray, np.ndarray]:
    half = d_head // 2
    cached = _rope_tables.get(d_head)
    if cached is None or cached[0].shape[0] <= upto:
        size = max(64, 2 * (upto + 1))
        inv_freq = ROPE_BASE ** (-2.0 * np.arange(half, dtype=np.float64) / d_head)
        angles = np.arange(size, dtype=np.float64)[:, None] * inv_freq[None, :]
        _rope_tables[d_head] = (np.cos(angles), np.sin(angles))
    return _rope_tables[d_head]


def _rotate_rows(mat: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Rotary phase rotation of each row at its own position (pure)."""
    d = mat.shape[1]
    half = d // 2
    if half == 0 or mat.shape[0] == 0:
        return mat.copy()
    cos_all, sin_all = _rope_table(d, int(positions.max(initial=0)))
    cos, sin = cos_all[positions], sin_all[positions]
    even = mat[:, 0 : 2 * half : 2]
    odd = mat[:, 1 : 2 * half : 2]
    out = mat.copy()
    out[:, 0 : 2 * half : 2] = even * cos - odd * sin
    out[:, 1 : 2 * half : 2] = even * sin + odd * cos
    return out


def rotate_vector(vec, position: int) -> np.ndarray:
    """Rotate one vector at the given encoding position (odd tail dim passes through)."""
    vec = np.asarray(vec, dtype=np.float64)
    return _rotate_rows(vec[None, :], np.array([position]))[0]


def encoding_positions(cache: KVCache) -> np.ndarray:
    """Positions the encoder assigns to the cached keys: always 0..len-1."""
    return np.arange(len(cache), dtype=np.int64)


def apply_positions(cache: KVCache, q, query_index: int | None = None):
    """Positionally encode the cached keys and the query.

    Keys are rotated at their current slot indices 0..len-1; the query is
    rotated at ``query_index``, defaulting to len(cache) (the re-assigned
    position of a token whose key has not been appended yet).  Stored keys
    are never mutated; encoding happens on copies at attention time.
    """
    q = np.asarray(q, dtype=np.float64)
    if query_index is None:
        query_index = len(cache)
    keys_encoded = _rotate_rows(cache.keys(), encoding_positions(cache))
    return keys_encoded, rotate_vector(q, query_index)


class StreamStep(NamedTuple):
    row: np.ndarray
    output: np.ndarray
    value: np.ndarray


class AttentionStream:
    """One (layer, head) decode stream: project, cache, encode, attend.

    Streams share nothing mutable; distinct streams may run in parallel.
    """

    def __init__(
        self,
        weights: ModelWeights,
        layer: int,
        head: int,
        capacity: int | None = None,
        reserve: int | None = None,
    ):
        self.weights = weights
        self.layer = layer
        self.head = head
        self.cache = KVCache(weights.dims.d_head, capacity=capacity, reserve=reserve)

    def step(self, x, original_position: int) -> StreamStep:
        q, k, v = project(x, self.weights, self.layer, self.head)
        self.cache.append(k, v, original_position)
        keys_encoded, q_encoded = apply_positions(
            self.cache, q, query_index=len(self.cache) - 1
        )
        row, output = _attend_arrays(q_encoded, keys_encoded, self.cache.values())
        return StreamStep(row, output, v)


def synthesize_embeddings(seed: int, count: int, d_model: int) -> np.ndarray:
    """Seed-reproducible stream of unit-normal embedding vectors (tag 4)."""
    stream = NormalStream(stream_seed(seed, TAG_EMBED_STREAM))
    flat = np.array(stream.normals(count * d_model), dtype=np.float64)
    return flat.reshape(count, d_model)


def synthesize_token_ids(seed: int, count: int, vocab: int) -> list[int]:
    """Seed-reproducible token-id stream (tag 3) for vocab-backed models."""
    if vocab < 1:
        raise DimensionError(f"vocab must be >= 1 to draw token ids, got {vocab}")
    return NormalStream(stream_seed(seed, TAG_TOKEN_STREAM)).integers(count, vocab)


def embed_tokens(weights: ModelWeights, token_ids) -> np.ndarray:
    if weights.embedding is None:
        raise StateError("model has no embedding table (vocab = 0)")
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1:
        raise DimensionError(f"token ids must be a flat sequence, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weights.dims.vocab):
        raise InputError(f"token id out of range for vocab {weights.dims.vocab}")
    return weights.embedding[ids].astype(np.float64)
