"""Portable deterministic randomness.

Every shuffle in the package is driven by the generator below so that any
implementation that follows the same recipe reproduces identical outputs:

* ``splitmix64`` expands a 64-bit seed into the 256-bit xoshiro256** state.
* ``Xoshiro256ss.next_u64`` is the reference xoshiro256** step.
* ``Xoshiro256ss.below(n)`` draws an unbiased integer in ``[0, n)`` by
  rejection: values ``>= 2**64 - (2**64 % n)`` are redrawn, the rest are
  reduced modulo ``n``.
* ``fisher_yates`` walks ``i = n-1 .. 1`` and swaps ``i`` with ``below(i+1)``.

Per-example streams come from ``stream_seed``: the FNV-1a 64-bit hash of the
UTF-8 string ``"{global_seed}|{example_id}|{kind}|{epoch}"`` passed through
one splitmix64 finalisation round.
"""

from __future__ import annotations

from typing import MutableSequence, TypeVar

MASK64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3

T = TypeVar("T")


def splitmix64(state: int) -> tuple[int, int]:
    """Return ``(new_state, output)`` for one splitmix64 step."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256ss:
    """xoshiro256** seeded through splitmix64."""

    __slots__ = ("_s",)

    def __init__(self, seed: int):
        state = seed & MASK64
        s = []
        for _ in range(4):
            state, out = splitmix64(state)
            s.append(out)
        self._s = s

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def below(self, n: int) -> int:
        if n <= 0:
            raise ValueError(f"below() needs n >= 1, got {n}")
        if n == 1:
            return 0
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n


def fisher_yates(items: MutableSequence[T], rng: Xoshiro256ss) -> MutableSequence[T]:
    """Shuffle ``items`` in place and return it."""
    for i in range(len(items) - 1, 0, -1):
        j = rng.below(i + 1)
        items[i], items[j] = items[j], items[i]
    return items


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & MASK64
    return h


def stream_seed(global_seed: int, example_id: str, kind: str, epoch: int = 0) -> int:
    """Derive the 64-bit seed of one example's perturbation stream."""
    key = f"{global_seed}|{example_id}|{kind}|{epoch}".encode("utf-8")
    _, out = splitmix64(fnv1a64(key))
    return out
