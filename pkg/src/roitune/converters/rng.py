"""64-bit linear congruential generator with pinned constants.

Draws must be reproducible from other languages, so the arithmetic is spelled
out: ``state = (A * state + C) mod 2**64``, output the high 32 bits, and map to
``[0, n)`` by ``(out * n) >> 32``.
"""
from __future__ import annotations

from typing import MutableSequence

A = 6364136223846793005
C = 1442695040888963407
MASK = (1 << 64) - 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & MASK
    return h


class Lcg:
    def __init__(self, seed: int):
        self.state = seed & MASK

    def next_u32(self) -> int:
        self.state = (A * self.state + C) & MASK
        return self.state >> 32

    def below(self, n: int) -> int:
        if n < 1:
            raise ValueError("n must be >= 1")
        return (self.next_u32() * n) >> 32

    def shuffle(self, items: MutableSequence) -> None:
        """Fisher-Yates, last position first."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]


def item_rng(seed: int, key: str) -> Lcg:
    """Generator for one item, independent of processing order."""
    return Lcg((seed & MASK) ^ fnv1a64(key.encode("utf-8")))
