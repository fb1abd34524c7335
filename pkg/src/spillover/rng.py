"""Counter-based deterministic randomness.

Every stochastic draw in this package is keyed on (seed, item key) through a
stateless 64-bit mixer, so draws are reproducible and independent of iteration
or worker order. Bulk generation (geometry, metrics trajectories) uses
numpy Generators seeded through the same mixer.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U53 = np.float64(1.0 / (1 << 53))


def _mix(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer over a uint64 array (wraps mod 2^64)."""
    with np.errstate(over="ignore"):
        z = x + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def _as_u64(x) -> np.ndarray:
    return np.asarray(x).astype(np.uint64, copy=False)


def hash_key(seed: int, *keys) -> np.ndarray:
    """Mix a seed and any number of (broadcastable) integer key arrays into
    one uint64 hash array. Pure function of its arguments."""
    h = _mix(_as_u64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF)))
    for k in keys:
        with np.errstate(over="ignore"):
            h = _mix(h ^ _as_u64(k))
    return h


def uniform(seed: int, *keys) -> np.ndarray:
    """Per-key uniforms in [0, 1), deterministic in (seed, keys)."""
    return (hash_key(seed, *keys) >> np.uint64(11)).astype(np.float64) * _U53


def bernoulli(seed: int, p, *keys) -> np.ndarray:
    """Per-key Bernoulli(p) indicators, deterministic in (seed, keys)."""
    return uniform(seed, *keys) < np.asarray(p, dtype=np.float64)


def poisson(seed: int, lam, *keys) -> np.ndarray:
    """Per-key Poisson(lam) by inversion of a per-key uniform.

    Exact for the discrete CDF; intended for the moderate rates used in
    simulation (loop length grows with max(lam))."""
    lam = np.asarray(lam, dtype=np.float64)
    u = uniform(seed, *keys)
    u = np.broadcast_to(u, np.broadcast_shapes(u.shape, lam.shape)).copy()
    lam = np.broadcast_to(lam, u.shape)
    pmf = np.exp(-lam)
    cdf = pmf.copy()
    k = np.zeros(u.shape, dtype=np.int64)
    active = u >= cdf
    kmax = int(np.ceil(lam.max() + 12.0 * np.sqrt(lam.max() + 1.0) + 30)) if u.size else 0
    step = 0
    while active.any():
        step += 1
        if step > kmax:
            raise RuntimeError("poisson inversion did not terminate; rate too large")
        k[active] += 1
        pmf = pmf * lam / step
        cdf = cdf + pmf
        active &= u >= cdf
    return k


def derive_seed(seed: int, *words: int) -> int:
    """Derive an independent child seed from (seed, words)."""
    return int(hash_key(seed, *[np.uint64(w & 0xFFFFFFFFFFFFFFFF) for w in words]))


def generator(seed: int, *words: int) -> np.random.Generator:
    """A numpy Generator seeded from the mixed (seed, words) key."""
    return np.random.default_rng(derive_seed(seed, *words))
