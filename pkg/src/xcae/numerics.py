"""Dense linear algebra helpers, activations, Adam and a seeded PRNG.

All arrays are float64 numpy arrays. The PRNG is SplitMix64 so draw
sequences can be reproduced from its recurrence alone (see ``SeededRng``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SIGMOID_CLAMP = 1e-12

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _check_finite(a: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"{what} produced non-finite values")
    return a


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return _check_finite(a @ b, "matmul")


def relu(v) -> np.ndarray:
    return np.maximum(np.asarray(v, dtype=np.float64), 0.0)


def relu_prime(v) -> np.ndarray:
    # subgradient at 0 is 0
    return (np.asarray(v, dtype=np.float64) > 0.0).astype(np.float64)


def sigmoid(x):
    """Logistic function clamped to [1e-12, 1 - 1e-12] so logs stay finite."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    out = np.clip(out, SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)
    return out if out.ndim else float(out)


def sigmoid_raw(x: np.ndarray) -> np.ndarray:
    """Unclamped logistic, used inside the networks where exact derivatives matter."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class AdamState:
    shape: tuple
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ValueError("Adam epsilon must be positive")
        if self.m is None:
            self.m = np.zeros(self.shape)
        if self.v is None:
            self.v = np.zeros(self.shape)

    def copy(self) -> "AdamState":
        return AdamState(self.shape, self.beta1, self.beta2, self.epsilon,
                         self.step, self.m.copy(), self.v.copy())


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              lr: float) -> np.ndarray:
    """Bias-corrected Adam update. Mutates ``state`` and returns new params."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeError(
            f"params {params.shape}, grads {grads.shape}, state {state.m.shape} differ")
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1 ** state.step)
    v_hat = state.v / (1.0 - b2 ** state.step)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)


# ---------------------------------------------------------------------------
# SplitMix64
# ---------------------------------------------------------------------------

def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def _mix64_int(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & _MASK64
    return h


def derive_seed(master: int, name: str) -> int:
    """Child seed for a named stage: mix64(master XOR fnv1a64(name))."""
    return _mix64_int((int(master) & _MASK64) ^ fnv1a64(name))


class SeededRng:
    """SplitMix64 generator.

    State is a 64-bit counter. Draw k (k = 1, 2, ...) returns
    ``mix64(seed + k * 0x9E3779B97F4A7C15 mod 2**64)`` where

        mix64(z): z = (z ^ z>>30) * 0xBF58476D1CE4E5B9
                  z = (z ^ z>>27) * 0x94D049BB133111EB
                  return z ^ z>>31

    Doubles are ``(u64 >> 11) * 2**-53``; integers in [0, n) are
    ``floor(double * n)``; normals use Box-Muller on two consecutive doubles
    (``sqrt(-2 ln(1-u1)) * cos(2 pi u2)``).
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._state = self.seed

    @property
    def state(self) -> int:
        return self._state

    def spawn(self, name: str) -> "SeededRng":
        return SeededRng(derive_seed(self.seed, name))

    def next_u64(self, n: int) -> np.ndarray:
        n = int(n)
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        k = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self._state) + k * np.uint64(_GAMMA)
            out = _mix64(z)
        self._state = (self._state + n * _GAMMA) & _MASK64
        return out

    def random(self, n: int | tuple = 1) -> np.ndarray:
        shape = (n,) if isinstance(n, int) else tuple(n)
        total = int(np.prod(shape))
        u = (self.next_u64(total) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        return u.reshape(shape)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return low + (high - low) * self.random(shape)

    def integers(self, n: int, size: int | tuple = 1) -> np.ndarray:
        """Integers in [0, n)."""
        if n <= 0:
            raise ValueError("n must be positive")
        u = self.random(size)
        return np.minimum((u * n).astype(np.int64), n - 1)

    def normal(self, shape) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        total = int(np.prod(shape))
        u = self.random(2 * total)
        u1, u2 = u[0::2], u[1::2]
        z = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
        return z.reshape(shape)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), via Floyd's algorithm."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct items from {n}")
        if k == 0:
            return np.zeros(0, dtype=np.int64)
        u = self.random(k)
        chosen: list[int] = []
        seen: set[int] = set()
        for idx, j in enumerate(range(n - k, n)):
            t = min(int(u[idx] * (j + 1)), j)
            if t in seen:
                seen.add(j)
                chosen.append(j)
            else:
                seen.add(t)
                chosen.append(t)
        return np.asarray(chosen, dtype=np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        u = self.random(n - 1)
        for idx, i in enumerate(range(n - 1, 0, -1)):
            j = min(int(u[idx] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
