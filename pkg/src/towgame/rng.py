"""Counter-based random streams.

Every draw is a pure function of ``(seed, sample, step, slot)``, so a
trajectory's randomness does not depend on how samples are batched or spread
over workers. The mixing function is the SplitMix64 finaliser applied twice.
"""

from __future__ import annotations

import numba
import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_STEP = np.uint64(0xD1B54A32D192ED03)
_SLOT = np.uint64(0x8CB92BA72F3D8DD7)

SLOT_COIN = 0
SLOT_RADIUS = 1
SLOT_GAUSS = 2  # 2 .. 2 + 2*ceil(n/2)


def _mix(z: np.ndarray) -> np.ndarray:
    z = z + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@numba.njit(inline="always")
def _mix1(z):
    z = z + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@numba.njit(cache=True)
def _uniform_kernel(sample, step, slot, key, out):
    for i in range(sample.size):
        s = _mix1(sample[i] ^ key)
        z = _mix1(s + step[i] * np.uint64(0xD1B54A32D192ED03) + slot * np.uint64(0x8CB92BA72F3D8DD7))
        z = _mix1(z ^ s)
        out[i] = np.float64(z >> np.uint64(11)) * 2.0**-53


def _u64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.int64).astype(np.uint64)


class CounterRNG:
    """Uniform draws indexed by ``(sample, step, slot)`` under a fixed seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        with np.errstate(over="ignore"):
            self._key = _mix(np.array([self.seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))[0]

    def uniform(self, sample, step, slot: int) -> np.ndarray:
        """Uniform floats in ``[0, 1)``; ``sample`` and ``step`` broadcast."""
        sample, step = np.broadcast_arrays(_u64(sample), _u64(step))
        out = np.empty(sample.shape)
        _uniform_kernel(sample.ravel(), step.ravel(), np.uint64(slot), self._key, out.reshape(-1))
        return out

    def coin(self, sample, step) -> np.ndarray:
        return self.uniform(sample, step, SLOT_COIN)

    def ball(self, sample, step, n: int) -> np.ndarray:
        """Uniform points of the unit ball in ``R^n``, shape ``(len(sample), n)``."""
        sample = np.atleast_1d(sample)
        pairs = (n + 1) // 2
        u = [self.uniform(sample, step, SLOT_GAUSS + j) for j in range(2 * pairs)]
        radius_u = self.uniform(sample, step, SLOT_RADIUS)
        return ball_from_uniforms(radius_u, np.stack(u, axis=-1), n)

    def stream(self, sample: int) -> "SampleStream":
        return SampleStream(self, sample)


def ball_from_uniforms(radius_u: np.ndarray, gauss_u: np.ndarray, n: int) -> np.ndarray:
    """Gaussian direction (Box-Muller) times radius ``U^(1/n)``."""
    g = []
    for j in range(0, gauss_u.shape[-1], 2):
        rad = np.sqrt(-2.0 * np.log1p(-gauss_u[..., j]))
        ang = 2.0 * np.pi * gauss_u[..., j + 1]
        g += [rad * np.cos(ang), rad * np.sin(ang)]
    g = np.stack(g[:n], axis=-1)
    norm = np.linalg.norm(g, axis=-1, keepdims=True)
    norm = np.where(norm > 0, norm, 1.0)
    return g / norm * (radius_u ** (1.0 / n))[..., None]


class SampleStream:
    """The draws of a single trajectory (used by :func:`towgame.game.play_game`)."""

    def __init__(self, rng: CounterRNG, sample: int):
        self.rng = rng
        self.sample = int(sample)

    def coin(self, step: int) -> float:
        return float(self.rng.coin([self.sample], step)[0])

    def ball(self, step: int, n: int) -> np.ndarray:
        return self.rng.ball([self.sample], step, n)[0]
