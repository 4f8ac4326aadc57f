"""Counter-based random streams.

Every random number is a pure function of (master seed, stream id, counter):
``u = mix64(key + (counter + 1) * GOLDEN)`` with ``key = stream_key(seed, stream)``
and ``mix64`` the SplitMix64 output finaliser. Streams therefore never depend
on how repetitions are scheduled across threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_STREAM_SALT = 0xD1B54A32D192ED03

_U_GOLDEN = np.uint64(GOLDEN)
_U_M1 = np.uint64(_M1)
_U_M2 = np.uint64(_M2)
_U_SALT = np.uint64(_STREAM_SALT)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_INV53 = 1.0 / 9007199254740992.0


def _check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed <= MASK64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def mix64_int(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def stream_key_int(seed: int, stream_id: int) -> int:
    return mix64_int(mix64_int(_check_seed(seed)) ^ ((int(stream_id) * _STREAM_SALT + GOLDEN) & MASK64))


@nb.njit(inline="always", cache=True)
def mix64(z):
    z = (z ^ (z >> _S30)) * _U_M1
    z = (z ^ (z >> _S27)) * _U_M2
    return z ^ (z >> _S31)


@nb.njit(inline="always", cache=True)
def stream_key(seed, stream_id):
    return mix64(mix64(seed) ^ (stream_id * _U_SALT + _U_GOLDEN))


@nb.njit(inline="always", cache=True)
def uniform(key, counter):
    """Uniform double in the open interval (0, 1)."""
    z = mix64(key + (counter + _ONE) * _U_GOLDEN)
    return ((z >> _S11) + 0.5) * _INV53


def uniforms_np(key: int, start: int, n: int) -> np.ndarray:
    """Vectorised reference of :func:`uniform` for counters ``start .. start+n-1``."""
    with np.errstate(over="ignore"):
        ctr = np.arange(start, start + n, dtype=np.uint64) + _ONE
        z = np.uint64(key) + ctr * _U_GOLDEN
        z = (z ^ (z >> _S30)) * _U_M1
        z = (z ^ (z >> _S27)) * _U_M2
        z = z ^ (z >> _S31)
    return ((z >> _S11).astype(np.float64) + 0.5) * _INV53


@dataclass(frozen=True)
class RngContract:
    """Identifies one repetition's random stream."""

    master_seed: int
    stream_id: int

    def __post_init__(self):
        _check_seed(self.master_seed)
        if self.stream_id < 0:
            raise ValueError("stream_id must be non-negative")

    @property
    def key(self) -> int:
        return stream_key_int(self.master_seed, self.stream_id)

    def uniforms(self, n: int, start: int = 0) -> np.ndarray:
        return uniforms_np(self.key, start, n)
