"""Seeded, counter-based random streams.

Every stochastic choice in the toolkit draws from an `Rng` derived from a
single user seed plus an explicit stream path (module name, image id, ...).
The underlying bit generator is Philox, which is counter-based, so identical
seed + identical call sequence gives identical output on every platform.
Derived streams are independent: the Philox key is a SHA-256 digest of
(seed, path), so adding draws to one stream never perturbs another.
"""

from __future__ import annotations

import hashlib

import numpy as np

_U64 = 0xFFFFFFFFFFFFFFFF


class Rng:
    """Deterministic random stream addressed by (seed, stream path)."""

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed) & _U64
        self.path = tuple(path)
        digest = hashlib.sha256(repr((self.seed, self.path)).encode("utf-8")).digest()
        key = int.from_bytes(digest[:16], "little")
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def derive(self, *path) -> "Rng":
        """Child stream for a named sub-task, e.g. rng.derive("image", 17)."""
        return Rng(self.seed, self.path + tuple(path))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size=None, replace=True, p=None):
        return self._gen.choice(n, size=size, replace=replace, p=p)

    def beta(self, a: float, b: float, size=None):
        return self._gen.beta(a, b, size)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path!r})"
