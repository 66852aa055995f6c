"""Counter-based random streams.

Rendering noise (stratified jitter, importance-sampling draws, pixel/frame
selection during training) is produced by a stateless hash of
``(seed, tag, stream, counter)`` rather than a sequential generator.  Two
consequences the rest of the code relies on:

* a pixel's random numbers depend only on its own identifiers, so renders are
  bit-identical no matter how rays are chunked or how many worker threads run;
* resuming a training run at iteration ``i`` replays exactly the draws the
  uninterrupted run would have made.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV_2_53 = float(2.0 ** -53)

# stream tags, spaced so purposes never collide
TAG_STRATIFIED = 0x01
TAG_IMPORTANCE = 0x02
TAG_PIXEL_PICK = 0x10
TAG_FRAME_PICK = 0x11


def _mix(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer over uint64 arrays."""
    x = (x + _GAMMA).astype(np.uint64)
    x ^= x >> np.uint64(30)
    x *= _M1
    x ^= x >> np.uint64(27)
    x *= _M2
    x ^= x >> np.uint64(31)
    return x


def hash_u64(seed: int, tag: int, stream, counter) -> np.ndarray:
    """Hash the identifier tuple into uint64 words; broadcasts stream/counter."""
    s = np.asarray(stream, dtype=np.uint64)
    c = np.asarray(counter, dtype=np.uint64)
    with np.errstate(over="ignore"):
        h = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ (np.uint64(tag) * _GAMMA))
        h = _mix(h ^ s)
        h = _mix(h ^ c)
    return h


def uniform(seed: int, tag: int, stream, counter) -> np.ndarray:
    """float64 uniforms in [0, 1), one per broadcast element of stream x counter."""
    h = hash_u64(seed, tag, stream, counter)
    return (h >> np.uint64(11)).astype(np.float64) * _INV_2_53


def randint(seed: int, tag: int, stream, counter, n: int) -> np.ndarray:
    """Integers in [0, n) derived from the same stream hash."""
    if n <= 0:
        raise ValueError("randint needs n >= 1")
    return (uniform(seed, tag, stream, counter) * n).astype(np.int64).clip(0, n - 1)
