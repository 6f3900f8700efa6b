"""Command-line harness tying the engine, policies, prefill and wavelet
analysis into reproducible, machine-readable experiments.

Subcommands: gen-weights, decode, prefill, map, analyze, compare.  Every
RunConfig field can come from a JSON config file and be overridden by a
flag of the same name.  All commands are pure functions of (config, input
files): reruns write byte-identical output.

Exit codes: 0 success, 2 config error, 3 input error, 4 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, fields

import numpy as np

from .engine import (
    ModelDims,
    ModelWeights,
    embed_tokens,
    generate_weights,
    load_weights,
    save_weights,
    synthesize_embeddings,
    synthesize_token_ids,
)
from .errors import ConfigError, InputError, LevelError, SelectorError, TreeKVError
from .policies import POLICY_SPECS, ProtectedZones, decode_with_policy
from .prefill import observation_scores, partition_blocks, treekv_prefill_compress
from .trace import (
    DecodeTrace,
    distribution_map,
    read_trace,
    validate_trace,
    write_trace,
)
from .wavelet import magnitude_profile


@dataclass
class RunConfig:
    policy: str = "treekv"
    c: int = 1024
    zones: str = "sink=4,recent=508"
    seed: int = 0
    T: int = 512
    layers: int = 2
    heads: int = 4
    d_model: int = 64
    d_head: int = 16
    vocab: int = 0
    block_size: int = 64
    cache_blocks: int = 8
    levels: int = 5
    exclude: int = 32
    step: int | None = None
    weights: str | None = None
    trace_detail: str = "full"  # "full" records rows and values, "light" neither

    def dims(self) -> ModelDims:
        return ModelDims(self.layers, self.heads, self.d_model, self.d_head, self.vocab)

    def validate(self) -> None:
        if self.policy not in POLICY_SPECS:
            raise ConfigError(
                f"unknown policy {self.policy!r}, expected one of {', '.join(POLICY_SPECS)}"
            )
        if self.policy != "full" and self.c < 2:
            raise ConfigError(f"violated precondition c >= 2 (got c={self.c})")
        if self.T < 1:
            raise ConfigError(f"violated precondition T >= 1 (got T={self.T})")
        ProtectedZones.parse(self.zones)
        if self.trace_detail not in ("full", "light"):
            raise ConfigError(
                f"trace_detail must be 'full' or 'light', got {self.trace_detail!r}"
            )
        try:
            self.dims().validate()
        except TreeKVError as exc:
            raise ConfigError(str(exc)) from exc


_CONFIG_FIELDS = {f.name for f in fields(RunConfig)}


def load_config(path: str | None, overrides: dict) -> RunConfig:
    config = RunConfig()
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as exc:
            raise InputError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        unknown = sorted(set(data) - _CONFIG_FIELDS)
        if unknown:
            raise ConfigError(f"config {path} has unknown fields: {unknown}")
        for key, value in data.items():
            setattr(config, key, value)
    for key, value in overrides.items():
        if value is not None:
            setattr(config, key, value)
    config.validate()
    return config


def _config_overrides(args) -> dict:
    return {
        name: getattr(args, name)
        for name in _CONFIG_FIELDS
        if hasattr(args, name)
    }


def _add_config_flags(parser, names) -> None:
    string_fields = ("policy", "zones", "weights", "trace_detail")
    for name in names:
        flag = "--" + name.replace("_", "-")
        if name in string_fields:
            parser.add_argument(flag, dest=name, default=None)
        else:
            parser.add_argument(flag, dest=name, type=int, default=None)


def _resolve_weights(config: RunConfig) -> ModelWeights:
    if config.weights:
        return load_weights(config.weights)
    return generate_weights(config.seed, config.dims())


def _load_token_file(path: str, d_model: int):
    """Token file: a JSON array of ids, or of d_model-length embedding rows."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read token file {path}: {exc}") from exc
    if not isinstance(data, list) or not data:
        raise InputError(f"token file {path} must be a non-empty JSON array")
    if all(isinstance(item, int) for item in data):
        return data, None
    try:
        matrix = np.asarray(data, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise InputError(f"token file {path} holds neither ids nor vectors") from exc
    if matrix.ndim != 2 or matrix.shape[1] != d_model:
        raise InputError(
            f"embedding rows in {path} must have length {d_model}, got {matrix.shape}"
        )
    return None, matrix


def _prepare_inputs(config: RunConfig, weights: ModelWeights, tokens_path: str | None):
    """Input embeddings plus the token ids when a vocab is configured."""
    if tokens_path is not None:
        ids, matrix = _load_token_file(tokens_path, config.d_model)
        if ids is not None:
            if weights.dims.vocab < 1:
                raise InputError("token ids need a model with vocab > 0")
            return embed_tokens(weights, ids), ids
        return matrix, None
    if weights.dims.vocab > 0:
        ids = synthesize_token_ids(config.seed, config.T, weights.dims.vocab)
        return embed_tokens(weights, ids), ids
    return synthesize_embeddings(config.seed, config.T, config.d_model), None


def _open_out(path: str | None):
    if path is None or path == "-":
        return sys.stdout, False
    return open(path, "w", encoding="utf-8", newline=""), True


def cmd_gen_weights(args) -> int:
    dims = ModelDims(args.layers, args.heads, args.d_model, args.d_head, args.vocab)
    try:
        dims.validate()
    except TreeKVError as exc:
        raise ConfigError(str(exc)) from exc
    save_weights(generate_weights(args.seed, dims), args.out)
    return 0


def cmd_decode(args) -> int:
    config = load_config(args.config, _config_overrides(args))
    weights = _resolve_weights(config)
    inputs, ids = _prepare_inputs(config, weights, args.tokens)
    if len(inputs) != config.T:
        config.T = len(inputs)
    full_detail = config.trace_detail == "full"
    trace = decode_with_policy(
        weights,
        inputs,
        config.policy,
        config.c,
        config.zones,
        stream_seed=config.seed,
        token_ids=ids,
        record_rows=full_detail,
        record_values=full_detail,
    )
    write_trace(trace, args.out)
    return 0


def cmd_map(args) -> int:
    trace = read_trace(args.trace)
    validate_trace(trace)
    grid = distribution_map(trace)
    out, close = _open_out(args.out)
    try:
        for layer in range(grid.shape[0]):
            cells = ",".join(str(value) for value in grid[layer])
            out.write(f"{layer},{cells}\n")
    finally:
        if close:
            out.close()
    return 0


def cmd_analyze(args) -> int:
    config = load_config(args.config, _config_overrides(args))
    traces = [read_trace(path) for path in args.trace]
    for trace in traces:
        validate_trace(trace)
    profile = magnitude_profile(traces, config.levels, config.exclude, config.step)
    out, close = _open_out(args.out)
    try:
        profile.write_csv(out)
    finally:
        if close:
            out.close()
    return 0


def cmd_prefill(args) -> int:
    config = load_config(args.config, _config_overrides(args))
    weights = _resolve_weights(config)
    inputs, _ids = _prepare_inputs(config, weights, args.prompt)
    prompt_len = len(inputs)
    partition = partition_blocks(prompt_len, config.block_size)
    window_start = partition.observation_window[0]
    dims = weights.dims

    out, close = _open_out(args.out)
    try:
        retained_tokens = []
        for layer in range(dims.layers):
            for head in range(dims.heads):
                # Full causal pass; only the window queries' rows are kept.
                trace = _window_rows(weights, inputs, layer, head, window_start)
                scores = observation_scores(trace, partition)
                kept = treekv_prefill_compress(partition, scores, config.cache_blocks)
                ranges = [list(partition.blocks[i]) for i in kept]
                token_count = sum(end - start for start, end in ranges)
                retained_tokens.append(token_count)
                line = {
                    "layer": layer,
                    "head": head,
                    "retained_blocks": ranges,
                    "block_scores": scores.tolist(),
                    "retained_tokens": token_count,
                }
                out.write(json.dumps(line, separators=(",", ":")) + "\n")
        summary = {
            "summary": {
                "prompt_len": prompt_len,
                "block_size": config.block_size,
                "cache_blocks": config.cache_blocks,
                "blocks_total": len(partition.blocks),
                "mean_retained_tokens": sum(retained_tokens) / len(retained_tokens),
            }
        }
        out.write(json.dumps(summary, separators=(",", ":")) + "\n")
    finally:
        if close:
            out.close()
    return 0


def _window_rows(weights, inputs, layer, head, window_start):
    from .engine import AttentionStream

    stream = AttentionStream(weights, layer, head, capacity=None, reserve=len(inputs))
    rows = []
    for position in range(len(inputs)):
        row, _output, _value = stream.step(inputs[position], position)
        if position >= window_start:
            rows.append(row)
    return rows


def _overlap(a: list[int], b: list[int]) -> float:
    sa, sb = set(a), set(b)
    return len(sa & sb) / max(len(sa), len(sb))


def _quartile_counts(positions: list[int], seq_len: int) -> list[int]:
    bounds = [0, seq_len // 4, seq_len // 2, (3 * seq_len) // 4, seq_len]
    return [
        sum(1 for p in positions if bounds[q] <= p < bounds[q + 1])
        for q in range(4)
    ]


def _mean_nll(trace: DecodeTrace, weights: ModelWeights) -> float | None:
    if weights.dims.vocab < 1 or trace.token_ids is None:
        return None
    total = 0.0
    count = 0
    for record in trace.steps[:-1]:
        features = np.concatenate(
            [record.outputs[l][h] for l in range(weights.dims.layers)
             for h in range(weights.dims.heads)]
        )
        logits = weights.logits(features)
        shifted = logits - logits.max()
        log_norm = np.log(np.exp(shifted).sum())
        target = trace.token_ids[record.step]  # next token
        total += float(log_norm - shifted[target])
        count += 1
    return total / count if count else None


def cmd_compare(args) -> int:
    if len(args.configs) < 2:
        raise ConfigError("compare needs at least two config files")
    configs = [load_config(path, {}) for path in args.configs]
    first = configs[0]
    for config in configs[1:]:
        same_stream = (
            config.dims() == first.dims()
            and config.seed == first.seed
            and config.T == first.T
            and config.weights == first.weights
        )
        if not same_stream:
            raise InputError(
                "compare requires configs sharing model dims, seed and T "
                "(mismatched streams)"
            )
    weights = _resolve_weights(first)
    inputs, ids = _prepare_inputs(first, weights, None)
    runs = []
    for config in configs:
        trace = decode_with_policy(
            weights,
            inputs,
            config.policy,
            config.c,
            config.zones,
            stream_seed=config.seed,
            token_ids=ids,
            record_rows=False,
            record_values=False,
            record_outputs=True,
        )
        runs.append((config, trace))

    reference = runs[0][1].final_retained()
    out, close = _open_out(args.out)
    try:
        out.write("policy,overlap,q1,q2,q3,q4,nll\n")
        for config, trace in runs:
            final = trace.final_retained()
            overlaps = []
            quartiles = np.zeros(4, dtype=np.float64)
            streams = 0
            for layer in range(first.layers):
                for head in range(first.heads):
                    overlaps.append(
                        _overlap(final[layer][head], reference[layer][head])
                    )
                    quartiles += np.array(
                        _quartile_counts(final[layer][head], first.T), dtype=np.float64
                    )
                    streams += 1
            quartiles /= streams
            nll = _mean_nll(trace, weights)
            cells = [
                config.policy,
                str(float(np.mean(overlaps))),
                *(str(q) for q in quartiles),
                "" if nll is None else str(nll),
            ]
            out.write(",".join(cells) + "\n")
    finally:
        if close:
            out.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="treekv",
        description="Tree-cycle KV-cache eviction experiments at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-weights", help="generate a deterministic weight file")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--layers", type=int, default=2)
    gen.add_argument("--heads", type=int, default=4)
    gen.add_argument("--d-model", dest="d_model", type=int, default=64)
    gen.add_argument("--d-head", dest="d_head", type=int, default=16)
    gen.add_argument("--vocab", type=int, default=0)
    gen.add_argument("--out", "-o", required=True)
    gen.set_defaults(func=cmd_gen_weights)

    decode = sub.add_parser("decode", help="run a decode experiment, write a trace")
    decode.add_argument("--config", default=None)
    _add_config_flags(decode, sorted(_CONFIG_FIELDS))
    decode.add_argument("--tokens", default=None, help="JSON token-id or embedding file")
    decode.add_argument("--out", "-o", default="trace.jsonl")
    decode.set_defaults(func=cmd_decode)

    map_cmd = sub.add_parser("map", help="per-position head-retention fractions")
    map_cmd.add_argument("--trace", required=True)
    map_cmd.add_argument("--out", "-o", default=None)
    map_cmd.set_defaults(func=cmd_map)

    analyze = sub.add_parser("analyze", help="band-magnitude profile of a trace")
    analyze.add_argument("--trace", action="append", required=True)
    analyze.add_argument("--config", default=None)
    _add_config_flags(analyze, ["levels", "exclude", "step"])
    analyze.add_argument("--out", "-o", default=None)
    analyze.set_defaults(func=cmd_analyze)

    prefill = sub.add_parser("prefill", help="block-level prompt compression")
    prefill.add_argument("--config", default=None)
    _add_config_flags(prefill, sorted(_CONFIG_FIELDS))
    prefill.add_argument("--prompt", default=None, help="JSON token-id or embedding file")
    prefill.add_argument("--out", "-o", default=None)
    prefill.set_defaults(func=cmd_prefill)

    compare = sub.add_parser("compare", help="summary table across policy configs")
    compare.add_argument("configs", nargs="+")
    compare.add_argument("--out", "-o", default=None)
    compare.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, LevelError, SelectorError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 3
    except TreeKVError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
