"""
Named, seeded random streams.

Each stream is a `numpy.random.Philox` generator keyed by (seed, crc32(name)).
Draw `k` of a stream uses counter [0, 0, 0, k], so any single draw can be
replayed from (seed, name, k) without replaying the ones before it.
"""
import zlib
from dataclasses import dataclass, field

import numpy as np

from core.errors import ConfigurationError

STREAM_NAMES = ("init", "shuffle", "augment", "mask", "noise", "subset", "mixup", "regularizer", "probe")


def _stream_key(seed, name):
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode("utf8"))]
    return np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint64)


@dataclass
class RngStream:
    name: str
    seed: int
    counter: int = 0
    _key: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self._key = _stream_key(self.seed, self.name)

    def generator_at(self, counter) -> np.random.Generator:
        bit_gen = np.random.Philox(key=self._key, counter=np.array([0, 0, 0, counter], dtype=np.uint64))
        return np.random.Generator(bit_gen)

    def next_generator(self) -> np.random.Generator:
        """Generator for the next draw; advances the counter by one."""
        gen = self.generator_at(self.counter)
        self.counter += 1
        return gen


class SeedBundle:
    """Seed per stream name; every stochastic component draws from its own stream."""

    def __init__(self, seeds):
        self.seeds = {str(k): int(v) for k, v in dict(seeds).items()}
        unknown = sorted(set(self.seeds) - {"base", *STREAM_NAMES})
        if unknown:
            raise ConfigurationError(f"unknown seed streams {unknown}; known: base, {', '.join(STREAM_NAMES)}")
        self._streams = {}

    def stream(self, name) -> RngStream:
        if name not in STREAM_NAMES:
            raise ConfigurationError(f"unknown RNG stream {name!r}")
        if name not in self._streams:
            seed = self.seeds.get(name, self.seeds.get("base", 0))
            self._streams[name] = RngStream(name, seed)
        return self._streams[name]

    def as_dict(self):
        return dict(self.seeds)
