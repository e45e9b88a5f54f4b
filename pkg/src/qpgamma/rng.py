"""Counter-based random numbers.

Every draw is a pure function of ``(master_seed, event_index, *counters)``,
so a batch can be split across any number of workers (or processed in any
order) and still reproduce the same per-event numbers.  The mixing function
is the SplitMix64 finalizer applied once per key component.
"""
from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / float(1 << 53)

# stream tags keep unrelated consumers of the same event apart
TAG_DECAY = 1
TAG_PHOTON = 2
TAG_CARRIER = 3
TAG_SYNTH = 4
TAG_MISC = 5


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = z + _GOLDEN
        z = (z ^ (z >> _S30)) * _M1
        z = (z ^ (z >> _S27)) * _M2
        return z ^ (z >> _S31)


def hash_keys(seed: int, *keys) -> np.ndarray:
    """Hash a seed and any number of broadcastable integer keys to uint64."""
    h = _mix(np.asarray(np.uint64(seed & 0xFFFFFFFFFFFFFFFF)))
    for k in keys:
        k = np.asarray(k)
        if k.dtype != np.uint64:
            k = k.astype(np.int64).astype(np.uint64)
        h = _mix(h ^ k)
    return h


def uniforms(seed: int, *keys) -> np.ndarray:
    """Uniform doubles in the open interval (0, 1), one per broadcast key."""
    h = hash_keys(seed, *keys)
    return ((h >> _S11).astype(np.float64) + 0.5) * _INV53


class EventStream:
    """Stateful uniform stream for one event.

    Thin sequential wrapper over :func:`uniforms`; two instances built from
    the same ``(master_seed, event_index, tag)`` yield identical sequences.
    """

    def __init__(self, master_seed: int, event_index: int, tag: int = TAG_MISC):
        self.master_seed = int(master_seed)
        self.event_index = int(event_index)
        self.tag = int(tag)
        self._counter = 0

    def random(self, size: int | None = None):
        n = 1 if size is None else int(size)
        idx = np.arange(self._counter, self._counter + n, dtype=np.int64)
        self._counter += n
        u = uniforms(self.master_seed, self.event_index, self.tag, idx)
        return float(u[0]) if size is None else u

    def raw64(self) -> int:
        """Next raw 64-bit draw (used for distinctness checks)."""
        h = hash_keys(self.master_seed, self.event_index, self.tag, self._counter)
        self._counter += 1
        return int(h)

    def normal(self, size: int | None = None):
        n = 1 if size is None else int(size)
        u1 = self.random(n)
        u2 = self.random(n)
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return float(z[0]) if size is None else z

    def generator(self) -> np.random.Generator:
        """A numpy Generator seeded deterministically from this stream."""
        return np.random.default_rng([self.raw64() & 0xFFFFFFFF, self.raw64() >> 32])


def rng_substream(master_seed: int, event_index: int, tag: int = TAG_MISC) -> EventStream:
    return EventStream(master_seed, event_index, tag)


def isotropic_directions(u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    """Map two uniform arrays to unit vectors uniform on the sphere, shape (n, 3)."""
    cos_t = 2.0 * u1 - 1.0
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t * cos_t))
    phi = 2.0 * np.pi * u2
    return np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=-1)
