"""Simulated time and seeded randomness shared by every component."""

from __future__ import annotations

import hashlib

import numpy as np


class SimClock:
    """Microsecond clock advanced only by explicit charges."""

    def __init__(self, now: float = 0.0):
        self._now = float(now)

    @property
    def now(self) -> float:
        return self._now

    def charge(self, cost_us: float) -> None:
        if cost_us < 0:
            raise ValueError(f"cannot charge negative time {cost_us}")
        self._now += cost_us

    def __repr__(self):
        return f"SimClock(now={self._now:.3f})"


class Drbg:
    """Deterministic byte generator (SHAKE-256 in counter mode).

    Stands in for the token's hardware RNG so that keys, IVs and handles are
    reproducible under a scenario seed.
    """

    def __init__(self, seed: bytes | int):
        if isinstance(seed, int):
            seed = seed.to_bytes(32, "big", signed=False)
        self._key = hashlib.sha256(b"fido-sidechan drbg" + seed).digest()
        self._counter = 0

    def bytes(self, n: int) -> bytes:
        out = hashlib.shake_256(self._key + self._counter.to_bytes(8, "big")).digest(n)
        self._counter += 1
        return out


def seed_sequence(seed: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed)


def spawn_generators(ss: np.random.SeedSequence, k: int) -> list[np.random.Generator]:
    return [np.random.default_rng(child) for child in ss.spawn(k)]


def drbg_from(ss: np.random.SeedSequence) -> Drbg:
    return Drbg(ss.generate_state(8, dtype=np.uint32).tobytes())


def truncated_normal(rng: np.random.Generator, mean: float, std: float) -> float:
    """One draw from N(mean, std) conditioned on being >= 0."""
    if std == 0:
        return max(mean, 0.0)
    while True:
        x = rng.normal(mean, std)
        if x >= 0:
            return float(x)
