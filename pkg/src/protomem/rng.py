"""Deterministic pseudo-random streams.

The generator is a 64-bit counter stream: the state advances by the golden
gamma increment and each output is the counter pushed through a
xorshift-multiply finalizer. The full algorithm (documented in README.md under
"Random number generation") is:

    state   <- (state + 0x9E3779B97F4A7C15) mod 2^64
    z       <- state
    z       <- (z XOR (z >> 30)) * 0xBF58476D1CE4E5B9 mod 2^64
    z       <- (z XOR (z >> 27)) * 0x94D049BB133111EB mod 2^64
    output  <- z XOR (z >> 31)

Uniform doubles take the top 53 bits: u = (output >> 11) * 2^-53, giving
[0, 1). Normal draws consume exactly two uniforms via Box-Muller:
z = sqrt(-2 ln(1 - u1)) * cos(2 pi u2).

Because the state is a pure counter, a batch of n draws is computed in one
vectorized shot and is bit-identical to n scalar calls; the scalar methods are
thin wrappers over batches of one. Identical seeds therefore give
bit-identical streams on any platform with IEEE-754 doubles.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)

# fnv-1a, used only to derive named child seeds
_FNV_BASIS = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _mix64(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def fnv1a64(label: str) -> int:
    h = _FNV_BASIS
    for byte in label.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def derive_seed(seed: int, label: str) -> int:
    """Stable child seed for a named stream, so draw orders stay independent."""
    z = np.uint64((seed & 0xFFFFFFFFFFFFFFFF) ^ fnv1a64(label))
    return int(_mix64(z))


class Rng:
    """Counter-based 64-bit generator with bit-exact batch/scalar parity."""

    def __init__(self, seed: int):
        self._state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)

    def derive(self, label: str) -> "Rng":
        return Rng(derive_seed(int(self._state), label))

    def raw64(self, n: int) -> np.ndarray:
        """Next n outputs as uint64, advancing the state by n steps."""
        if n < 0:
            raise DomainError("draw count must be nonnegative")
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64)
            states = self._state + steps * _GAMMA
            self._state = (self._state + np.uint64(n % (1 << 64)) * _GAMMA) & _MASK
            return _mix64(states)

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles in [0, 1)."""
        return (self.raw64(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def normals(self, n: int) -> np.ndarray:
        """n standard normal doubles; consumes exactly 2n uniforms."""
        u = self.uniforms(2 * n)
        u1, u2 = u[0::2], u[1::2]
        return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)

    def normal_matrix(self, rows: int, cols: int, std: float = 1.0) -> np.ndarray:
        return (self.normals(rows * cols) * std).reshape(rows, cols)

    def next_u64(self) -> int:
        return int(self.raw64(1)[0])

    def uniform(self) -> float:
        return float(self.uniforms(1)[0])

    def normal(self) -> float:
        return float(self.normals(1)[0])

    def below(self, n: int) -> int:
        """Integer in [0, n) as next_u64 mod n (documented, reproducible)."""
        if n <= 0:
            raise DomainError("below() needs a positive bound")
        return self.next_u64() % n

    def choose(self, pool: int, count: int) -> list[int]:
        """count distinct indices from range(pool) by partial Fisher-Yates."""
        if count > pool:
            raise DomainError("cannot choose more items than the pool holds")
        items = list(range(pool))
        for i in range(count):
            j = i + self.below(pool - i)
            items[i], items[j] = items[j], items[i]
        return items[:count]
