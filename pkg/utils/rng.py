from typing import Sequence, Tuple
import numpy as np


class RngStream:
    """Reproducible random stream identified by a seed and a split lineage.

    Streams are addressed, not advanced: the same (seed, path) always yields the same
    generator, and children created with split(i) are statistically independent of
    each other and of the parent (numpy SeedSequence spawn keys).

    Attributes:
        seed (int): 64-bit root seed.
        stream_path (Tuple[int, ...]): Split lineage from the root.
    """

    def __init__(self, seed: int, stream_path: Sequence[int] = ()):
        if seed < 0 or seed >= 2 ** 64:
            raise ValueError("seed must fit in 64 unsigned bits, got {}".format(seed))
        self.seed = int(seed)
        self.stream_path: Tuple[int, ...] = tuple(int(i) for i in stream_path)

    def split(self, index: int) -> "RngStream":
        """Child stream number `index`"""
        if index < 0:
            raise ValueError("stream index must be non-negative")
        return RngStream(self.seed, self.stream_path + (index,))

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream"""
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream_path)
        return np.random.Generator(np.random.PCG64(sequence))

    def __eq__(self, other):
        if not isinstance(other, RngStream):
            return NotImplemented
        return self.seed == other.seed and self.stream_path == other.stream_path

    def __hash__(self):
        return hash((self.seed, self.stream_path))

    def __repr__(self):
        return "RngStream(seed={}, stream_path={})".format(self.seed, list(self.stream_path))
