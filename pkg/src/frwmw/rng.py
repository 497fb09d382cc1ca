"""Counter-based random streams.

Every walk draws from its own stream whose key is derived from
``(seed, walk_index)``.  Output ``c`` of a stream is a SplitMix64 finalizer
applied to ``key + c * golden``, so any draw can be recomputed from its
position alone and results never depend on how walks are scheduled.

Kernels carry a stream as a 2-element ``uint64`` array ``[key, counter]``.
"""

import numpy as np
from numba import njit

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_INV53 = 1.0 / 9007199254740992.0


@njit(cache=True)
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True)
def stream_key(seed, index):
    return mix64(mix64(np.uint64(seed) + GOLDEN) ^ mix64(np.uint64(index) * GOLDEN + _ONE))


@njit(cache=True)
def next_u64(st):
    st[1] += _ONE
    return mix64(st[0] + st[1] * GOLDEN)


@njit(cache=True)
def next_uniform(st):
    """Uniform double in [0, 1) with 53 random bits."""
    return float(next_u64(st) >> _S11) * _INV53


@njit(cache=True)
def _fill_uniform(st, out):
    for i in range(out.shape[0]):
        out[i] = next_uniform(st)


class Stream:
    """One independent random stream (``key``, ``counter``).

    ``random()`` mirrors :meth:`numpy.random.Generator.random` so plain
    samplers accept either object.
    """

    def __init__(self, key, counter=0):
        self.state = np.array([key, counter], dtype=np.uint64)

    @classmethod
    def for_walk(cls, seed, index):
        return cls(stream_key(np.uint64(seed), np.uint64(index)))

    @property
    def key(self):
        return int(self.state[0])

    @property
    def counter(self):
        return int(self.state[1])

    def random(self, size=None):
        if size is None:
            return next_uniform(self.state)
        out = np.empty(int(np.prod(size)), dtype=np.float64)
        _fill_uniform(self.state, out)
        return out.reshape(size)

    def spawn(self, index):
        return Stream(stream_key(self.state[0], np.uint64(index)))

    def __repr__(self):
        return f"Stream(key={self.key:#018x}, counter={self.counter})"
