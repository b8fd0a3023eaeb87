"""Shapley attributions for a scalar model: value function, exact enumeration,
Monte-Carlo over uniform coalitions, and kernel-weighted regression.

``model_fn`` always takes a batch ``(m, d)`` and returns ``(m,)`` scalars.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .numerics import SeededRng, ShapeError

ModelFn = Callable[[np.ndarray], np.ndarray]
METHODS = ("exact", "montecarlo", "kernel", "fastshap_c", "fastshap")
MAX_EXACT_D = 15
RIDGE = 1e-10


@dataclass(frozen=True)
class CoalitionMask:
    d: int
    bits: tuple

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if len(bits) != self.d:
            raise ShapeError(f"mask has {len(bits)} bits for d={self.d}")
        if any(b not in (0, 1) for b in bits):
            raise ValueError("mask bits must be 0 or 1")
        object.__setattr__(self, "bits", bits)

    @classmethod
    def from_set(cls, d: int, members) -> "CoalitionMask":
        bits = [0] * d
        for i in members:
            if not 0 <= i < d:
                raise ValueError(f"feature index {i} outside 0..{d - 1}")
            bits[i] = 1
        return cls(d, tuple(bits))

    @classmethod
    def full(cls, d: int) -> "CoalitionMask":
        return cls(d, (1,) * d)

    @classmethod
    def empty(cls, d: int) -> "CoalitionMask":
        return cls(d, (0,) * d)

    def members(self) -> frozenset:
        return frozenset(i for i, b in enumerate(self.bits) if b)

    def array(self) -> np.ndarray:
        return np.array(self.bits, dtype=bool)


@dataclass
class ValueFunctionConfig:
    """How absent features are filled in.

    ``mean``: replaced by ``baseline`` (training-set feature means).
    ``background``: averaged over ``K`` rows of ``background``, chosen once with ``seed``.
    """
    baseline_mode: str = "mean"
    baseline: Optional[np.ndarray] = None
    background: Optional[np.ndarray] = None
    K: int = 32
    seed: int = 0
    _rows: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.baseline_mode not in ("mean", "background"):
            raise ValueError(f"unknown baseline_mode {self.baseline_mode!r}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.baseline_mode == "background":
            if self.background is None or len(self.background) == 0:
                raise ValueError("background-sampling needs a nonempty background set")
            bg = np.asarray(self.background, dtype=np.float64)
            self.background = bg
            rng = SeededRng(self.seed)
            self._rows = bg[rng.integers(len(bg), self.K)]
            if self.baseline is None:
                self.baseline = bg.mean(axis=0)
        if self.baseline is not None:
            self.baseline = np.asarray(self.baseline, dtype=np.float64)

    @classmethod
    def mean(cls, means) -> "ValueFunctionConfig":
        return cls("mean", baseline=np.asarray(means, dtype=np.float64))

    def fill_rows(self, d: int) -> np.ndarray:
        """Rows (K', d) supplying values for absent features."""
        if self.baseline_mode == "mean":
            if self.baseline is None:
                raise ValueError("mean-imputation needs baseline feature means")
            if self.baseline.shape != (d,):
                raise ShapeError(f"baseline has shape {self.baseline.shape}, expected ({d},)")
            return self.baseline[None, :]
        if self._rows.shape[1] != d:
            raise ShapeError("background width does not match x")
        return self._rows


@dataclass
class Attribution:
    phi: np.ndarray
    method: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=np.float64)
        if self.phi.ndim != 1:
            raise ShapeError("phi must be a vector")
        if not np.all(np.isfinite(self.phi)):
            raise ValueError("attribution is not finite")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")


def _check_x(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("x must be a single feature vector")
    return x


def coalition_values(model_fn: ModelFn, x, masks: np.ndarray, cfg: ValueFunctionConfig) -> np.ndarray:
    """v(S) for each boolean row of ``masks`` (m, d)."""
    x = _check_x(x)
    masks = np.asarray(masks, dtype=bool)
    if masks.ndim != 2 or masks.shape[1] != x.size:
        raise ShapeError(f"masks must be (m, {x.size}), got {masks.shape}")
    fill = cfg.fill_rows(x.size)
    K = fill.shape[0]
    # (m, K, d): present features from x, absent ones from each fill row
    inputs = np.where(masks[:, None, :], x[None, None, :], fill[None, :, :])
    out = np.asarray(model_fn(inputs.reshape(-1, x.size)), dtype=np.float64).reshape(len(masks), K)
    return out.mean(axis=1)


def value_function(model_fn: ModelFn, x, mask: CoalitionMask, cfg: ValueFunctionConfig) -> float:
    x = _check_x(x)
    if mask.d != x.size:
        raise ShapeError(f"mask is for d={mask.d}, x has {x.size} features")
    return float(coalition_values(model_fn, x, mask.array()[None, :], cfg)[0])


def all_masks(d: int) -> np.ndarray:
    """Every coalition as a (2^d, d) boolean array; row k has bit i = (k >> i) & 1."""
    k = np.arange(1 << d)
    return ((k[:, None] >> np.arange(d)[None, :]) & 1).astype(bool)


def shapley_weights(d: int) -> np.ndarray:
    """|S|! (d - |S| - 1)! / d! for |S| = 0..d-1."""
    return np.array([math.factorial(s) * math.factorial(d - s - 1) / math.factorial(d)
                     for s in range(d)])


def exact_shapley(model_fn: ModelFn, x, cfg: ValueFunctionConfig) -> Attribution:
    x = _check_x(x)
    d = x.size
    if d > MAX_EXACT_D:
        raise ValueError(f"exact enumeration refused for d={d} > {MAX_EXACT_D}")
    masks = all_masks(d)
    v = coalition_values(model_fn, x, masks, cfg)
    sizes = masks.sum(axis=1)
    w = shapley_weights(d)
    k = np.arange(1 << d)
    phi = np.zeros(d)
    for i in range(d):
        without = k[(k >> i) & 1 == 0]
        phi[i] = np.sum(w[sizes[without]] * (v[without | (1 << i)] - v[without]))
    return Attribution(phi, "exact", {"evaluations": int(1 << d),
                                      "v_empty": float(v[0]), "v_full": float(v[-1])})


def mc_shapley(model_fn: ModelFn, x, M: int, rng: SeededRng, cfg: ValueFunctionConfig) -> Attribution:
    """Uniform-coalition Monte Carlo.

    Each of the ``M`` draws takes S uniformly from all subsets. Feature i is
    credited f(S u {i}) - f(S \\ {i}), so its coalition of the other features is
    uniform too, and every draw contributes to every feature. phi_i is the
    sum divided by M.
    """
    x = _check_x(x)
    if M < 1:
        raise ValueError("M must be >= 1")
    d = x.size
    S = rng.random((M, d)) < 0.5
    phi = np.zeros(d)
    chunk = max(1, 20000 // (d + 1))
    eye = np.eye(d, dtype=bool)
    for lo in range(0, M, chunk):
        s = S[lo:lo + chunk]
        m = len(s)
        flipped = s[:, None, :] ^ eye[None, :, :]           # (m, d, d)
        masks = np.concatenate([s[:, None, :], flipped], axis=1).reshape(-1, d)
        v = coalition_values(model_fn, x, masks, cfg).reshape(m, d + 1)
        base, other = v[:, :1], v[:, 1:]
        with_i = np.where(s, base, other)
        without_i = np.where(s, other, base)
        phi += (with_i - without_i).sum(axis=0)
    return Attribution(phi / M, "montecarlo", {"M": int(M), "evaluations": int(M * (d + 1))})


def kernel_weights(d: int, sizes: np.ndarray) -> np.ndarray:
    sizes = np.asarray(sizes)
    return (d - 1) / (np.array([math.comb(d, int(s)) for s in sizes]) * sizes * (d - sizes))


def _sample_kernel_masks(d: int, n: int, rng: SeededRng) -> np.ndarray:
    """Paired draws from the Shapley-kernel distribution over proper coalitions."""
    sizes = np.arange(1, d)
    p = (d - 1) / (sizes * (d - sizes))
    cdf = np.cumsum(p / p.sum())
    n_pairs = (n + 1) // 2
    u = rng.random(n_pairs)
    draw = sizes[np.minimum(np.searchsorted(cdf, u, side="right"), d - 2)]
    keys = rng.random((n_pairs, d))
    order = np.argsort(keys, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(d)[None, :].repeat(n_pairs, 0), axis=1)
    masks = rank < draw[:, None]
    both = np.empty((2 * n_pairs, d), dtype=bool)
    both[0::2] = masks
    both[1::2] = ~masks
    return both[:n]


def solve_constrained_wls(A: np.ndarray, b: np.ndarray, w: np.ndarray, total: float):
    """argmin_phi sum_k w_k (b_k - A_k . phi)^2 subject to sum(phi) = total.

    Returns (phi, damped) where ``damped`` flags the ridge fallback.
    """
    d = A.shape[1]
    Aw = A * w[:, None]
    kkt = np.zeros((d + 1, d + 1))
    kkt[:d, :d] = A.T @ Aw
    kkt[:d, d] = 1.0
    kkt[d, :d] = 1.0
    rhs = np.concatenate([Aw.T @ b, [total]])
    cond = np.linalg.cond(kkt)
    damped = False
    if not np.isfinite(cond) or cond > 1e12:
        kkt[:d, :d] += RIDGE * np.eye(d)
        damped = True
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        kkt[:d, :d] += RIDGE * np.eye(d)
        sol = np.linalg.solve(kkt, rhs)
        damped = True
    phi = sol[:d]
    # restore the constraint exactly after the solve
    phi = phi + (total - phi.sum()) / d
    return phi, damped


def kernel_shapley(model_fn: ModelFn, x, n_samples: int, rng: SeededRng,
                   cfg: ValueFunctionConfig) -> Attribution:
    """Shapley-kernel weighted least squares with the efficiency constraint.

    When ``n_samples`` covers every proper coalition they are enumerated with
    exact kernel weights; otherwise coalitions are drawn from the kernel
    distribution (in complementary pairs) and weighted uniformly.
    """
    x = _check_x(x)
    d = x.size
    if n_samples < d + 2:
        raise ValueError(f"n_samples must be >= d + 2 = {d + 2}")
    ends = coalition_values(model_fn, x, np.array([np.zeros(d, bool), np.ones(d, bool)]), cfg)
    v0, v1 = float(ends[0]), float(ends[1])
    n_proper = (1 << d) - 2 if d < 62 else None
    if n_proper is not None and n_samples >= n_proper:
        masks = all_masks(d)[1:-1]
        w = kernel_weights(d, masks.sum(axis=1))
        enumerated = True
    else:
        masks = _sample_kernel_masks(d, n_samples, rng)
        w = np.ones(len(masks))
        enumerated = False
    v = coalition_values(model_fn, x, masks, cfg)
    phi, damped = solve_constrained_wls(masks.astype(np.float64), v - v0, w, v1 - v0)
    return Attribution(phi, "kernel", {"n_samples": int(len(masks)), "enumerated": enumerated,
                                       "ridge_damped": damped, "v_empty": v0, "v_full": v1})


@dataclass
class GlobalAttribution:
    mean: np.ndarray
    mean_abs: np.ndarray

    def ranking(self) -> np.ndarray:
        """Features by decreasing mean |phi|; ties keep the lower index first."""
        return np.argsort(-self.mean_abs, kind="stable")


def global_shapley(attributions: Sequence) -> GlobalAttribution:
    phis = [a.phi if isinstance(a, Attribution) else np.asarray(a, dtype=np.float64)
            for a in attributions]
    if not phis:
        raise ValueError("need at least one attribution")
    d = phis[0].shape
    if any(p.shape != d for p in phis):
        raise ShapeError("attributions differ in length")
    P = np.stack(phis)
    return GlobalAttribution(P.mean(axis=0), np.abs(P).mean(axis=0))


def explain_rows(method: str, model_fn: ModelFn, X, cfg: ValueFunctionConfig, seed: int = 0,
                 M: int = 2000, n_samples: int = 512) -> list[Attribution]:
    """Attribute every row of ``X``; row k uses its own RNG stream derived from ``seed``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    master = SeededRng(seed)
    out = []
    for k, x in enumerate(X):
        if method == "exact":
            out.append(exact_shapley(model_fn, x, cfg))
        elif method == "montecarlo":
            out.append(mc_shapley(model_fn, x, M, master.spawn(f"row-{k}"), cfg))
        elif method == "kernel":
            out.append(kernel_shapley(model_fn, x, n_samples, master.spawn(f"row-{k}"), cfg))
        else:
            raise ValueError(f"explain_rows does not handle method {method!r}")
    return out


def write_attribution_csv(path, attributions: Sequence[Attribution], feature_names: Sequence[str],
                          sample_ids=None) -> None:
    ids = range(len(attributions)) if sample_ids is None else sample_ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "feature", "phi", "method"])
        for sid, a in zip(ids, attributions):
            for name, v in zip(feature_names, a.phi):
                w.writerow([sid, name, repr(float(v)), a.method])


def attribution_summary(attributions: Sequence[Attribution], feature_names: Sequence[str]) -> dict:
    g = global_shapley(attributions)
    return {
        "method": attributions[0].method,
        "n_samples": len(attributions),
        "features": list(feature_names),
        "global_mean": [float(v) for v in g.mean],
        "global_mean_abs": [float(v) for v in g.mean_abs],
        "ranking": [feature_names[i] for i in g.ranking()],
    }


def write_attribution_json(path, attributions: Sequence[Attribution], feature_names: Sequence[str],
                           extra: Optional[dict] = None) -> None:
    doc = attribution_summary(attributions, feature_names)
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
