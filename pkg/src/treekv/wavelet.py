"""Multi-level discrete Haar wavelet decomposition and band analysis.

Single-level analysis filters (orthonormal Haar): low-pass taps
[sqrt(2)/2, sqrt(2)/2] and high-pass taps [-sqrt(2)/2, sqrt(2)/2], followed
by stride-2 down-sampling.  In pairwise form, with s indexed from 0::

    A[i] = (s[2i] + s[2i+1]) / sqrt(2)
    D[i] = (s[2i] - s[2i+1]) / sqrt(2)

Single-level synthesis inverts exactly::

    r[2i]   = (A[i] + D[i]) / sqrt(2)
    r[2i+1] = (A[i] - D[i]) / sqrt(2)

Odd-length inputs are zero-padded by one trailing sample at each level and
trimmed on reconstruction; analyses should prefer power-of-two windows so
no boundary coefficients appear.  Coefficients of an L-level decomposition
are kept as [A_L, D_L, ..., D_1], lowest frequency first.

reconstruct_component inverts the transform with every band except one
zeroed, isolating that band's additive contribution to the signal.
magnitude_profile applies this to decode traces: the per-channel signal at
generation step t is the attention row multiplied elementwise by each
value channel, and the profile is the mean absolute component value per
position, averaged over channels, heads, layers and traces in a fixed
summation order (results are independent of trace iteration order to well
below 1e-9).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionError,
    InputError,
    LevelError,
    SelectorError,
)
from .trace import DecodeTrace, signals_at_step

_SQRT2 = math.sqrt(2.0)


def _as_signal(samples) -> np.ndarray:
    signal = np.asarray(samples, dtype=np.float64)
    if signal.ndim != 1:
        raise DimensionError(f"signal must be one-dimensional, got shape {signal.shape}")
    return signal


def _pad_even(signal: np.ndarray) -> np.ndarray:
    if len(signal) % 2 == 0:
        return signal
    return np.concatenate([signal, [0.0]])


def dwt_single(samples) -> tuple[np.ndarray, np.ndarray]:
    """One analysis level: (approximation, detail), each ceil(N/2) long."""
    signal = _as_signal(samples)
    if len(signal) == 0:
        raise InputError("cannot decompose an empty signal")
    padded = _pad_even(signal)
    approx = (padded[0::2] + padded[1::2]) / _SQRT2
    detail = (padded[0::2] - padded[1::2]) / _SQRT2
    return approx, detail


def max_level(length: int) -> int:
    """Deepest meaningful level for a signal of the given length."""
    if length < 2:
        return 0
    return math.ceil(math.log2(length))


def _level_lengths(length: int, levels: int) -> list[int]:
    # lengths[l] is the input length at level l (lengths[0] = N).
    lengths = [length]
    for _ in range(levels):
        lengths.append((lengths[-1] + 1) // 2)
    return lengths


@dataclass(frozen=True)
class WaveletCoeffs:
    """L-level coefficient list [A_L, D_L, ..., D_1] plus the original length."""

    length: int
    approx: np.ndarray
    details: tuple[np.ndarray, ...]  # highest level first: (D_L, ..., D_1)

    @property
    def levels(self) -> int:
        return len(self.details)

    def band_names(self) -> list[str]:
        names = [f"A{self.levels}"]
        names += [f"D{self.levels - i}" for i in range(self.levels)]
        return names

    def band(self, selector: str) -> np.ndarray:
        if selector in ("A", f"A{self.levels}"):
            return self.approx
        match = re.fullmatch(r"D(\d+)", selector)
        if match:
            level = int(match.group(1))
            if 1 <= level <= self.levels:
                return self.details[self.levels - level]
        raise SelectorError(
            f"unknown band {selector!r}; valid bands: {', '.join(self.band_names())}"
        )


def dwt_multi(samples, levels: int) -> WaveletCoeffs:
    """Repeated single-level analysis of the running approximation."""
    signal = _as_signal(samples)
    if len(signal) == 0:
        raise InputError("cannot decompose an empty signal")
    if levels < 1:
        raise LevelError(f"levels must be >= 1, got {levels}")
    deepest = max_level(len(signal))
    if levels > deepest:
        raise LevelError(
            f"signal of length {len(signal)} supports at most {deepest} levels, "
            f"got {levels}"
        )
    details: list[np.ndarray] = []
    approx = signal
    for _ in range(levels):
        approx, detail = dwt_single(approx)
        details.append(detail)
    return WaveletCoeffs(len(signal), approx, tuple(reversed(details)))


def reconstruct_single(approx, detail) -> np.ndarray:
    """One synthesis level; output has length 2 * len(approx)."""
    approx = _as_signal(approx)
    detail = _as_signal(detail)
    if approx.shape != detail.shape:
        raise DimensionError(
            f"approximation and detail lengths differ: {approx.shape} vs {detail.shape}"
        )
    out = np.empty(2 * len(approx), dtype=np.float64)
    out[0::2] = (approx + detail) / _SQRT2
    out[1::2] = (approx - detail) / _SQRT2
    return out


def _synthesize(length: int, approx: np.ndarray, details) -> np.ndarray:
    lengths = _level_lengths(length, len(details))
    current = approx
    for level in range(len(details), 0, -1):
        current = reconstruct_single(current, details[len(details) - level])
        current = current[: lengths[level - 1]]
    return current


def reconstruct(coeffs: WaveletCoeffs) -> np.ndarray:
    """Full inverse transform back to the original length."""
    return _synthesize(coeffs.length, coeffs.approx, list(coeffs.details))


def reconstruct_component(coeffs: WaveletCoeffs, band: str) -> np.ndarray:
    """Length-N contribution of a single band, all other bands zeroed."""
    selected = coeffs.band(band)  # raises SelectorError for unknown bands
    approx = coeffs.approx if selected is coeffs.approx else np.zeros_like(coeffs.approx)
    details = [
        d if d is selected else np.zeros_like(d)
        for d in coeffs.details
    ]
    return _synthesize(coeffs.length, approx, details)


@dataclass
class MagnitudeProfile:
    """Mean absolute band contribution per position at a fixed step."""

    step: int
    positions: np.ndarray
    bands: list[str]
    values: np.ndarray  # shape (len(bands), len(positions))
    signal_count: int

    def rows(self):
        for j, position in enumerate(self.positions):
            for i, band in enumerate(self.bands):
                yield int(position), band, float(self.values[i, j])

    def write_csv(self, fh) -> None:
        fh.write("position,band,mean_abs_magnitude\n")
        for position, band, value in self.rows():
            fh.write(f"{position},{band},{value}\n")


def magnitude_profile(
    traces,
    levels: int,
    exclude: int,
    step: int | None = None,
) -> MagnitudeProfile:
    """Band-magnitude profile of attention-weighted value signals.

    For every trace, stream and hidden channel, the signal at the analysis
    step is row * value_channel over the slots present at attention time.
    Each signal is decomposed to the requested depth, every band is
    reconstructed in isolation, and absolute values are averaged across all
    signals.  The first and last ``exclude`` positions are dropped from the
    output.
    """
    traces = list(traces)
    if not traces:
        raise InputError("magnitude_profile needs at least one trace")
    if step is None:
        finals = {trace.seq_len for trace in traces}
        if len(finals) != 1:
            raise InputError(
                f"traces end at different steps {sorted(finals)}; pass an explicit step"
            )
        step = finals.pop()
    if exclude < 0:
        raise InputError(f"exclude must be non-negative, got {exclude}")

    accum = None
    bands: list[str] = []
    signal_length = None
    signal_count = 0
    for trace in traces:
        for _layer, _head, row, values in signals_at_step(trace, step):
            if signal_length is None:
                signal_length = len(row)
                if signal_length < 2**levels:
                    raise LevelError(
                        f"analysis step {step} has {signal_length} slots, fewer than "
                        f"2**{levels}; reduce the level count"
                    )
                if signal_length - 2 * exclude < 1:
                    raise InputError(
                        f"margins of {exclude} leave no positions out of {signal_length}"
                    )
            elif len(row) != signal_length:
                raise InputError(
                    "traces disagree on the slot count at the analysis step"
                )
            for channel in range(values.shape[1]):
                coeffs = dwt_multi(row * values[:, channel], levels)
                if accum is None:
                    bands = coeffs.band_names()
                    accum = np.zeros((len(bands), signal_length), dtype=np.float64)
                for i, band in enumerate(bands):
                    accum[i] += np.abs(reconstruct_component(coeffs, band))
                signal_count += 1
    window = slice(exclude, signal_length - exclude)
    positions = np.arange(signal_length, dtype=np.int64)[window]
    return MagnitudeProfile(
        step=step,
        positions=positions,
        bands=bands,
        values=accum[:, window] / signal_count,
        signal_count=signal_count,
    )
