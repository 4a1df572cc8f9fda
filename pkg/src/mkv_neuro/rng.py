"""Counter-based random number streams.

Every stochastic routine in the package draws from a stateless generator
``u = mix64(key + counter * GAMMA)`` (the splitmix64 output function), so a
draw is a pure function of ``(key, counter)``.  Stream keys are derived from
``(seed, module tag, stream index)`` with a stable hash, which makes results
independent of thread scheduling: sample ``i`` always consumes stream ``i``
regardless of which worker runs it.
"""

from __future__ import annotations

import hashlib

import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

_U53 = float(2.0**-53)


def derive_key(seed: int, tag: str, stream: int = 0) -> int:
    """Derive a 64-bit stream key from (seed, tag, stream index).

    Uses blake2b so the layout of parallel work can never collide streams
    by arithmetic accident.
    """
    h = hashlib.blake2b(
        f"{int(seed)}/{tag}/{int(stream)}".encode(), digest_size=8
    )
    return int.from_bytes(h.digest(), "little")


def mix64(x: np.ndarray | np.uint64) -> np.ndarray | np.uint64:
    """splitmix64 finalizer; bijective on uint64."""
    with np.errstate(over="ignore"):
        z = (np.uint64(x) + GAMMA) & np.uint64(0xFFFFFFFFFFFFFFFF)
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def uniforms(key: int, start: int, n: int) -> np.ndarray:
    """n uniforms in (0, 1) for counters start..start+n-1."""
    ctr = np.arange(start, start + n, dtype=np.uint64)
    with np.errstate(over="ignore"):
        raw = mix64(np.uint64(key) + ctr * GAMMA)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _U53


def exponentials(key: int, start: int, n: int) -> np.ndarray:
    """n unit-exponential draws by inverse CDF from the uniform stream."""
    ctr = np.arange(start, start + n, dtype=np.uint64)
    with np.errstate(over="ignore"):
        raw = mix64(np.uint64(key) + ctr * GAMMA)
    u = ((raw >> np.uint64(11)).astype(np.float64) + 1.0) * _U53  # (0, 1]
    return -np.log(u)
