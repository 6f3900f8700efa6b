"""Pinned pseudorandom streams for weights and synthetic token data.

Every random quantity in this package comes from one documented recurrence,
so a (seed, tag) pair produces bit-identical values on any machine and in
any run.  The recurrence is deliberately simple enough to re-implement from
this docstring alone:

state update (splitmix64)
    Each call returns ``mix64(state)`` and then advances
    ``state = (state + 0x9E3779B97F4A7C15) mod 2**64``.

output finalizer
    ``mix64(z)`` computes, in 64-bit wrap-around arithmetic::

        z = z + 0x9E3779B97F4A7C15
        z = (z XOR (z >> 30)) * 0xBF58476D1CE4E5B9
        z = (z XOR (z >> 27)) * 0x94D049BB133111EB
        return z XOR (z >> 31)

substream derivation (splitting)
    ``stream_seed(seed, tag) = mix64((seed mod 2**64) XOR mix64(tag))``.
    Tag values are fixed per consumer and listed in ``treekv.engine``.

uniforms
    The top 53 bits of each 64-bit word:
    ``u = (word >> 11) * 2.0**-53``, giving u in [0, 1).

normal variates (Marsaglia polar method)
    Draw ``v1 = 2*u - 1`` and ``v2 = 2*u' - 1`` from consecutive uniforms,
    let ``s = v1*v1 + v2*v2``, reject unless ``0 < s < 1``, then emit
    ``v1 * m`` followed by ``v2 * m`` with ``m = sqrt(-2*ln(s)/s)``.
    The second variate of each accepted pair is cached and returned by the
    next call, so the uniform stream is always consumed pairwise.

All floating-point steps use IEEE-754 double precision via the Python
``math`` module, never a vectorized library, so independently written
reference code reproduces the values exactly.
"""

from __future__ import annotations

import math

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    """Stateless splitmix64 output function (includes the golden increment)."""
    z = (z + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def stream_seed(seed: int, tag: int) -> int:
    """Derive the seed of an independent substream from (seed, tag)."""
    return mix64((seed & _MASK64) ^ mix64(tag & _MASK64))


class NormalStream:
    """Sequential stream of uniforms and polar-method normal variates."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64
        self._spare: float | None = None

    def next_u64(self) -> int:
        out = mix64(self._state)
        self._state = (self._state + _GOLDEN) & _MASK64
        return out

    def uniform(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits of one word."""
        return (self.next_u64() >> 11) * 2.0**-53

    def normal(self) -> float:
        if self._spare is not None:
            value = self._spare
            self._spare = None
            return value
        while True:
            v1 = 2.0 * self.uniform() - 1.0
            v2 = 2.0 * self.uniform() - 1.0
            s = v1 * v1 + v2 * v2
            if 0.0 < s < 1.0:
                m = math.sqrt(-2.0 * math.log(s) / s)
                self._spare = v2 * m
                return v1 * m

    def normals(self, count: int) -> list[float]:
        return [self.normal() for _ in range(count)]

    def integers(self, count: int, bound: int) -> list[int]:
        """Integers in [0, bound) by modular reduction of full words."""
        return [self.next_u64() % bound for _ in range(count)]
