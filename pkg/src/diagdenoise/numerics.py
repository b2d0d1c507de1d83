"""Dense float64 tensors, a fixed counter-based RNG, and the finite-difference oracle.

Tensors are plain numpy float64 arrays in row-major order. Every analytic
gradient in this project is hand-derived and certified against
:func:`finite_diff_grad`, so the oracle must stay independent of any other
numeric path in the repo.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Tensor = np.ndarray

#: RNG construction, recorded so an equivalent stream can be rebuilt elsewhere:
#: Philox4x64 keyed with the two uint64 words (seed, stream). Normal samples
#: come from Box-Muller applied to consecutive raw 64-bit words (u1 from the
#: even words mapped into (0, 1], u2 from the odd words into [0, 1)). Each
#: gaussian draw of n values consumes exactly 2*ceil(n/2) raw words.
RNG_ALGORITHM = "philox4x64(key=[seed,stream]) + box-muller"

_INV_2_53 = 2.0 ** -53


class Rng:
    """Seeded random stream with an explicitly forkable stream id.

    The raw integer stream is bit-identical across platforms for a given
    (seed, stream) pair. A single Rng instance is single-owner: draws mutate
    the counter. Use :meth:`fork` to derive independent streams.
    """

    def __init__(self, seed: int, stream: int = 0):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must fit in 64 bits")
        self.seed = int(seed)
        self.stream = int(stream)
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._bits = np.random.Philox(key=key)

    def fork(self, stream: int) -> "Rng":
        """New independent stream with the same seed; does not advance self."""
        return Rng(self.seed, stream)

    def raw(self, n: int) -> np.ndarray:
        """Next n words of the 64-bit integer stream."""
        out = self._bits.random_raw(n)
        return np.atleast_1d(np.asarray(out, dtype=np.uint64))

    def uniform(self, n: int) -> Tensor:
        """n doubles in [0, 1) from the top 53 bits of the integer stream."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53


def gaussian_sample(rng: Rng, shape: Sequence[int]) -> Tensor:
    """I.i.d. standard normal tensor via Box-Muller on the raw stream."""
    shape = tuple(int(s) for s in shape)
    n = int(np.prod(shape)) if shape else 0
    if n <= 0:
        raise ValueError("empty shape")
    pairs = (n + 1) // 2
    raw = rng.raw(2 * pairs)
    # u1 shifted into (0, 1] so log(u1) is finite.
    u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
    u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * _INV_2_53
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.empty(2 * pairs, dtype=np.float64)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    return z[:n].reshape(shape)


def ensure_finite(x: Tensor, context: str) -> Tensor:
    """Raise if any entry is NaN/Inf; used at operation boundaries."""
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {context}")
    return x


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, coordinate by coordinate.

    This is the independent oracle for every hand-derived gradient; it must not
    share code with the analytic paths it certifies.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros(x.size, dtype=np.float64)
    flat = x.ravel()
    for i in range(x.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = float(f(xp.reshape(x.shape)))
        fm = float(f(xm.reshape(x.shape)))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def relative_error(analytic: Tensor, numeric: Tensor, floor: float = 1e-8) -> float:
    """Max elementwise relative error with an absolute floor for tiny entries."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    b = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
