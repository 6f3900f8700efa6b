"""Tree-cycle KV-cache eviction for transformer decoding and prefilling.

A deterministic attention micro-engine with an explicit, evictable KV
cache; tree-cycle eviction with averaged attention scores plus sliding
window, cumulative-score and last-row baselines; block-level prompt
compression; multi-level Haar wavelet analysis of attention-weighted value
signals; and a CLI harness for reproducible experiments.
"""

from .engine import (
    AttentionStream,
    CacheSlot,
    KVCache,
    ModelDims,
    ModelWeights,
    apply_positions,
    attend,
    embed_tokens,
    encoding_positions,
    generate_weights,
    load_weights,
    project,
    rotate_vector,
    save_weights,
    synthesize_embeddings,
    synthesize_token_ids,
)
from .errors import (
    ConfigError,
    DimensionError,
    InputError,
    InvariantViolation,
    LevelError,
    OrderingError,
    SelectorError,
    StateError,
    TreeKVError,
)
from .policies import (
    POLICY_SPECS,
    EvictionPolicy,
    EvictionRecord,
    FullAttention,
    H2O,
    ImportanceTracker,
    ProtectedZones,
    StreamingLLM,
    TOVA,
    TreeKV,
    TreeKVState,
    advance_idx,
    average_scores,
    decode_with_policy,
    h2o_evict,
    make_policy,
    streaming_llm_evict,
    tova_evict,
    treekv_evict_step,
    update_scores,
)
from .prefill import (
    BlockPartition,
    observation_scores,
    partition_blocks,
    treekv_prefill_compress,
)
from .trace import (
    DecodeTrace,
    EvictionEvent,
    StepRecord,
    distribution_map,
    read_trace,
    signals_at_step,
    validate_trace,
    write_trace,
)
from .wavelet import (
    MagnitudeProfile,
    WaveletCoeffs,
    dwt_multi,
    dwt_single,
    magnitude_profile,
    max_level,
    reconstruct,
    reconstruct_component,
    reconstruct_single,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionStream",
    "BlockPartition",
    "CacheSlot",
    "ConfigError",
    "DecodeTrace",
    "DimensionError",
    "EvictionEvent",
    "EvictionPolicy",
    "EvictionRecord",
    "FullAttention",
    "H2O",
    "ImportanceTracker",
    "InputError",
    "InvariantViolation",
    "KVCache",
    "LevelError",
    "MagnitudeProfile",
    "ModelDims",
    "ModelWeights",
    "OrderingError",
    "POLICY_SPECS",
    "ProtectedZones",
    "SelectorError",
    "StateError",
    "StepRecord",
    "StreamingLLM",
    "TOVA",
    "TreeKV",
    "TreeKVError",
    "TreeKVState",
    "WaveletCoeffs",
    "advance_idx",
    "apply_positions",
    "attend",
    "average_scores",
    "decode_with_policy",
    "distribution_map",
    "dwt_multi",
    "dwt_single",
    "embed_tokens",
    "encoding_positions",
    "generate_weights",
    "h2o_evict",
    "load_weights",
    "magnitude_profile",
    "make_policy",
    "max_level",
    "observation_scores",
    "partition_blocks",
    "project",
    "read_trace",
    "reconstruct",
    "reconstruct_component",
    "reconstruct_single",
    "rotate_vector",
    "save_weights",
    "signals_at_step",
    "streaming_llm_evict",
    "synthesize_embeddings",
    "synthesize_token_ids",
    "tova_evict",
    "treekv_evict_step",
    "treekv_prefill_compress",
    "update_scores",
    "validate_trace",
    "write_trace",
]
