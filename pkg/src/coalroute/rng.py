"""Named, reproducible random streams.

Every stochastic component draws from a stream identified by a (seed, label)
pair. Identical pairs always produce identical generators, independent of
creation order, so runs are replayable end to end.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


def _label_words(label: str) -> tuple[int, ...]:
    # Stable 128-bit digest of the label, split into u32 words for SeedSequence.
    digest = hashlib.sha256(label.encode("utf-8")).digest()[:16]
    return tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))


def stable_hash64(label: str) -> int:
    """Deterministic 64-bit fingerprint of a string (process-independent)."""
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")


@dataclass(frozen=True)
class RngStream:
    """A named random stream rooted at a master seed.

    ``generator()`` returns a fresh ``numpy.random.Generator`` whose state
    depends only on ``(seed, name)``. ``child(label)`` derives a sub-stream;
    children with different labels are statistically independent.
    """

    seed: int
    name: str = "root"

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=(int(self.seed),) + _label_words(self.name))
        return np.random.Generator(np.random.PCG64(seq))

    def child(self, label: str) -> "RngStream":
        return RngStream(self.seed, f"{self.name}/{label}")

    def fingerprint(self) -> int:
        """64-bit identifier of this stream, used to tag generated artifacts."""
        return stable_hash64(f"{self.seed}:{self.name}")
