import hashlib
import math
from typing import List, MutableSequence, Sequence, TypeVar

import numpy as np

T = TypeVar("T")

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


class SplitMix64:
    """
    SplitMix64 generator; docs/prng.md gives the exact algorithm

    Every synthetic decision (layout, attributes, noise) draws from one of these, so worlds
    are reproducible bit for bit from their seed.
    """

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def random(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits"""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.random()

    def randint(self, low: int, high: int) -> int:
        """Uniform integer in [low, high], both inclusive"""
        if high < low:
            raise ValueError(f"empty range [{low}, {high}]")
        return low + int(self.random() * (high - low + 1))

    def choice(self, items: Sequence[T]) -> T:
        if not items:
            raise ValueError("choice from an empty sequence")
        return items[self.randint(0, len(items) - 1)]

    def shuffle(self, items: MutableSequence[T]) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i)
            items[i], items[j] = items[j], items[i]

    def sample(self, items: Sequence[T], k: int) -> List[T]:
        pool = list(items)
        self.shuffle(pool)
        return pool[:k]

    def gauss(self, mu: float = 0.0, sigma: float = 1.0) -> float:
        """Box-Muller, one fresh pair of uniforms per call"""
        u1 = 1.0 - self.random()
        u2 = self.random()
        return mu + sigma * math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def fork(self, tag: str) -> "SplitMix64":
        """Independent child stream keyed by a name"""
        salt = int.from_bytes(hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest(), "little")
        return SplitMix64(self.next_u64() ^ salt)

    def unit_vector(self, dim: int) -> np.ndarray:
        """Gaussian direction drawn through numpy's PCG64, seeded from this stream"""
        vector = np.random.Generator(np.random.PCG64(self.next_u64())).standard_normal(dim)
        return vector / np.linalg.norm(vector)

    def normal_vector(self, dim: int, sigma: float) -> np.ndarray:
        return np.random.Generator(np.random.PCG64(self.next_u64())).standard_normal(dim) * sigma


def keyed_stream(seed: int, tag: str) -> SplitMix64:
    """Stream that depends only on (seed, tag), whatever else was drawn before"""
    return SplitMix64(seed).fork(tag)
