"""Amortized Shapley explainer with efficiency normalization (fastSHAP-C).

A feed-forward net phi(x; theta) is fit to minimize

    (v(s; x) - v(0; x) - s . phi_hat(x))^2,   s ~ p(s)

where, when ``normalize`` is on,
phi_hat = phi + (v(1; x) - v(0; x) - sum(phi)) / d.
Coalition values do not depend on theta, so each run draws all (x, s) pairs
up front, evaluates them in bulk, and then runs the optimizer loop in the
kernel.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import kernels
from ._kernels_py import mlp_forward
from .numerics import SeededRng, ShapeError, derive_seed
from .shapley import Attribution, ModelFn, ValueFunctionConfig, coalition_values
from .sscae import Layout, init_model

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
DISTRIBUTIONS = ("shapley-kernel", "uniform-nonempty")
EVAL_CHUNK = 8192


class IncompatibleArtifactError(ValueError):
    """An explainer was paired with a model it was not trained for."""


@dataclass
class ExplainerTrainConfig:
    lr: float = 1e-3
    steps: int = 50_000
    subset_distribution: str = "shapley-kernel"
    seed: int = 0
    eval_n: int = 256
    normalize: bool = True
    batch_size: int = 1
    optimizer: str = "sgd"
    hidden: int = 128
    hidden_layers: int = 2

    def validate(self) -> list[str]:
        errs = []
        if not (self.lr > 0 and math.isfinite(self.lr)):
            errs.append("lr must be positive")
        if self.steps <= 0:
            errs.append("steps must be > 0")
        if self.eval_n < 1:
            errs.append("eval_n must be >= 1")
        if self.subset_distribution not in DISTRIBUTIONS:
            errs.append(f"subset_distribution must be one of {DISTRIBUTIONS}")
        if self.batch_size < 1:
            errs.append("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            errs.append("optimizer must be 'sgd' or 'adam'")
        if self.hidden < 1 or self.hidden_layers < 0:
            errs.append("hidden width must be >= 1 and hidden_layers >= 0")
        return errs


@dataclass
class ExplainerDiagnostics:
    cs: float
    em: float
    cs_coalition: float
    em_coalition: float
    cs_literal: float
    n_eval: int

    def to_dict(self) -> dict:
        return asdict(self)


def explainer_layout(d: int, hidden: int = 128, hidden_layers: int = 2) -> Layout:
    dims = (d,) + (hidden,) * hidden_layers + (d,)
    acts = ("relu",) * hidden_layers + ("linear",)
    return Layout(dims, acts, n_enc=len(acts), head=False)


def normalize_phi(phi: np.ndarray, delta_full) -> np.ndarray:
    """Shift every row of ``phi`` so it sums to ``delta_full``."""
    phi = np.asarray(phi, dtype=np.float64)
    d = phi.shape[-1]
    return phi + ((np.asarray(delta_full) - phi.sum(axis=-1)) / d)[..., None]


class ExplainerModel:
    def __init__(self, layout: Layout, params: np.ndarray, normalize: bool, v_empty: float,
                 explained_fn: Optional[ModelFn] = None, explained_ref: Optional[dict] = None,
                 meta: Optional[dict] = None):
        if layout.dims[0] != layout.dims[-1]:
            raise ShapeError("explainer output length must equal its input length")
        params = np.ascontiguousarray(params, dtype=np.float64)
        if params.shape != (layout.n_params,):
            raise ShapeError(f"expected {layout.n_params} parameters, got {params.shape}")
        self.layout = layout
        self.params = params
        self.normalize = bool(normalize)
        self.v_empty = float(v_empty)
        self.explained_fn = explained_fn
        self.explained_ref = dict(explained_ref or {})
        self.meta = dict(meta or {})

    @property
    def d(self) -> int:
        return self.layout.dims[0]

    def raw(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.d:
            raise ShapeError(f"explainer expects {self.d} features, got {X.shape[1]}")
        lay = self.layout
        return mlp_forward(self.params, lay.dims, lay.act_codes, lay.offsets, X)[-1]

    def phi_batch(self, X, v_full=None) -> np.ndarray:
        """phi_hat for each row; ``v_full`` (= f(x)) is computed when not supplied."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        phi = self.raw(X)
        if not self.normalize:
            return phi
        if v_full is None:
            if self.explained_fn is None:
                raise ValueError("normalization needs the explained function or v_full")
            v_full = np.asarray(self.explained_fn(X), dtype=np.float64)
        return normalize_phi(phi, np.asarray(v_full) - self.v_empty)

    # -- persistence -------------------------------------------------------
    def to_dict(self) -> dict:
        lay = self.layout
        return {
            "format_version": FORMAT_VERSION,
            "kind": "fastshap-c-explainer",
            "dims": list(lay.dims),
            "activations": list(lay.activations),
            "normalize": self.normalize,
            "v_empty": self.v_empty,
            "explained": self.explained_ref,
            "params": [float(v) for v in self.params],
            **self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, allow_nan=False)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, doc: dict, explained_fn: Optional[ModelFn] = None,
                  expected_ref: Optional[dict] = None) -> "ExplainerModel":
        if doc.get("format_version") != FORMAT_VERSION or doc.get("kind") != "fastshap-c-explainer":
            raise ValueError("not a version-1 fastSHAP-C explainer document")
        ref = doc.get("explained", {})
        if expected_ref is not None:
            for key, want in expected_ref.items():
                if ref.get(key) != want:
                    raise IncompatibleArtifactError(
                        f"explainer was trained for {key}={ref.get(key)!r}, got {want!r}")
        layout = Layout(tuple(doc["dims"]), tuple(doc["activations"]),
                        n_enc=len(doc["activations"]), head=False)
        reserved = {"format_version", "kind", "dims", "activations", "normalize", "v_empty",
                    "explained", "params"}
        meta = {k: v for k, v in doc.items() if k not in reserved}
        return cls(layout, np.asarray(doc["params"], dtype=np.float64), doc["normalize"],
                   doc["v_empty"], explained_fn, ref, meta)

    @classmethod
    def load(cls, path, explained_fn: Optional[ModelFn] = None,
             expected_ref: Optional[dict] = None) -> "ExplainerModel":
        return cls.from_dict(json.loads(Path(path).read_text()), explained_fn, expected_ref)


def model_hash(model_json: str) -> str:
    return hashlib.sha256(model_json.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Coalition sampling
# ---------------------------------------------------------------------------

def sample_coalitions(d: int, n: int, dist: str, rng: SeededRng) -> np.ndarray:
    """``n`` boolean coalitions of ``d`` features.

    ``shapley-kernel``: size k in 1..d-1 with p(k) proportional to (d-1)/(k(d-k)),
    then a uniform subset of that size. ``uniform-nonempty``: uniform over
    the 2^d - 1 nonempty subsets (rejection of the empty set).
    """
    if d < 2:
        raise ValueError("need at least two features")
    if dist == "shapley-kernel":
        sizes = np.arange(1, d)
        p = (d - 1) / (sizes * (d - sizes))
        cdf = np.cumsum(p / p.sum())
        k = sizes[np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), d - 2)]
        rank = np.argsort(np.argsort(rng.random((n, d)), axis=1, kind="stable"), axis=1,
                          kind="stable")
        return rank < k[:, None]
    if dist == "uniform-nonempty":
        out = rng.random((n, d)) < 0.5
        empty = np.flatnonzero(~out.any(axis=1))
        while empty.size:
            redraw = rng.random((empty.size, d)) < 0.5
            out[empty] = redraw
            empty = empty[~redraw.any(axis=1)]
        return out
    raise ValueError(f"unknown subset distribution {dist!r}")


def paired_values(model_fn: ModelFn, X: np.ndarray, S: np.ndarray, cfg: ValueFunctionConfig) -> np.ndarray:
    """v(S_k; X_k) for row-aligned pairs, evaluated in chunks."""
    X = np.asarray(X, dtype=np.float64)
    S = np.asarray(S, dtype=bool)
    n, d = X.shape
    fill = cfg.fill_rows(d)
    K = fill.shape[0]
    out = np.empty(n)
    step = max(1, EVAL_CHUNK // K)
    for lo in range(0, n, step):
        x, s = X[lo:lo + step], S[lo:lo + step]
        inputs = np.where(s[:, None, :], x[:, None, :], fill[None, :, :])
        v = np.asarray(model_fn(inputs.reshape(-1, d)), dtype=np.float64)
        out[lo:lo + step] = v.reshape(len(x), K).mean(axis=1)
    return out


def empty_value(model_fn: ModelFn, d: int, cfg: ValueFunctionConfig) -> float:
    """v(0): does not depend on x for either baseline mode."""
    return float(coalition_values(model_fn, np.zeros(d), np.zeros((1, d), bool), cfg)[0])


# ---------------------------------------------------------------------------
# Training and diagnostics
# ---------------------------------------------------------------------------

@dataclass
class ExplainerHistory:
    losses: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def running_mean(self, window: int = 500) -> np.ndarray:
        if self.losses.size < window:
            return np.array([self.losses.mean()]) if self.losses.size else self.losses
        c = np.cumsum(np.concatenate([[0.0], self.losses]))
        return (c[window:] - c[:-window]) / window


def train_explainer(explained_fn: ModelFn, X_train, cfg: ExplainerTrainConfig,
                    vf: ValueFunctionConfig, X_eval=None, explained_ref: Optional[dict] = None,
                    backend: Optional[str] = None):
    """Fit the explainer; returns (ExplainerModel, ExplainerDiagnostics, ExplainerHistory)."""
    errs = cfg.validate()
    if errs:
        raise ValueError("; ".join(errs))
    X_train = np.asarray(X_train, dtype=np.float64)
    if X_train.ndim != 2 or len(X_train) == 0:
        raise ShapeError("X_train must be a nonempty (n, d) array")
    d = X_train.shape[1]
    layout = explainer_layout(d, cfg.hidden, cfg.hidden_layers)
    params = init_model(layout, SeededRng(derive_seed(cfg.seed, "explainer-init"))).params
    rng = SeededRng(derive_seed(cfg.seed, "explainer-samples"))

    n_rows = cfg.steps * cfg.batch_size
    rows = rng.integers(len(X_train), n_rows)
    Xs = np.ascontiguousarray(X_train[rows])
    S = sample_coalitions(d, n_rows, cfg.subset_distribution, rng.spawn("coalitions"))
    v0 = empty_value(explained_fn, d, vf)
    delta_s = paired_values(explained_fn, Xs, S, vf) - v0
    delta_full = np.asarray(explained_fn(Xs), dtype=np.float64) - v0
    if not (np.all(np.isfinite(delta_s)) and np.all(np.isfinite(delta_full))):
        raise FloatingPointError("explained function returned non-finite values")

    use_adam = cfg.optimizer == "adam"
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    lay = layout
    losses, _ = kernels.get(backend).explainer_train(
        params, lay.dims_array, lay.act_codes, lay.offsets, Xs,
        np.ascontiguousarray(S, dtype=np.float64), delta_s, delta_full, float(cfg.lr),
        bool(cfg.normalize), int(cfg.batch_size), use_adam, m, v, 0)
    if not np.all(np.isfinite(losses)) or not np.all(np.isfinite(params)):
        bad = int(np.argmax(~np.isfinite(losses))) if not np.all(np.isfinite(losses)) else -1
        raise FloatingPointError(f"explainer training diverged (first non-finite loss at step {bad + 1})")

    meta = {"train_config": asdict(cfg), "subset_distribution": cfg.subset_distribution,
            "baseline_mode": vf.baseline_mode}
    explainer = ExplainerModel(layout, params, cfg.normalize, v0, explained_fn, explained_ref, meta)
    hist = ExplainerHistory(np.asarray(losses))

    if X_eval is None:
        X_eval = X_train
    X_eval = np.asarray(X_eval, dtype=np.float64)
    erng = SeededRng(derive_seed(cfg.seed, "explainer-eval"))
    pick = X_eval[erng.integers(len(X_eval), cfg.eval_n)] if len(X_eval) > cfg.eval_n else X_eval
    diag = diagnostics(explainer, pick, vf, erng.spawn("coalitions"), cfg.subset_distribution)
    return explainer, diag, hist


def explain(explainer: ExplainerModel, x) -> Attribution:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size != explainer.d:
        raise ShapeError(f"explainer expects a vector of {explainer.d} features")
    phi = explainer.phi_batch(x[None, :])[0]
    method = "fastshap_c" if explainer.meta.get("subset_distribution", "shapley-kernel") == "shapley-kernel" \
        else "fastshap"
    return Attribution(phi, method, {"normalized": explainer.normalize})


def _reconstruction_gap(explainer: ExplainerModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if len(X) == 0:
        raise ValueError("need at least one sample")
    f = np.asarray(explainer.explained_fn(X), dtype=np.float64)
    phi = explainer.phi_batch(X, f)
    return (f - explainer.v_empty) - phi.sum(axis=1)


def confidence_score(explainer: ExplainerModel, X) -> float:
    """mean_k |(f(x_k) - v(0)) - sum_i phi_i(x_k)|."""
    return float(np.mean(np.abs(_reconstruction_gap(explainer, X))))


def error_metric(explainer: ExplainerModel, X) -> float:
    """mean_k ((f(x_k) - v(0)) - sum_i phi_i(x_k))^2."""
    g = _reconstruction_gap(explainer, X)
    return float(np.mean(g * g))


def coalition_metrics(explainer: ExplainerModel, X, vf: ValueFunctionConfig, rng: SeededRng,
                      dist: str = "shapley-kernel"):
    """Coalition-level (cs, em) on fresh draws s_k, one per sample:

        cs = mean |f(s_k) - f(0) - s_k . phi_hat|,   em = mean (f(s_k) - s_k . phi_hat)^2
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    S = sample_coalitions(explainer.d, len(X), dist, rng)
    fs = paired_values(explainer.explained_fn, X, S, vf)
    fit = np.sum(S * explainer.phi_batch(X), axis=1)
    cs = float(np.mean(np.abs(fs - explainer.v_empty - fit)))
    em = float(np.mean((fs - fit) ** 2))
    return cs, em


def diagnostics(explainer: ExplainerModel, X, vf: ValueFunctionConfig, rng: SeededRng,
                dist: str = "shapley-kernel") -> ExplainerDiagnostics:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    cs_c, em_c = coalition_metrics(explainer, X, vf, rng, dist)
    f = np.asarray(explainer.explained_fn(X), dtype=np.float64)
    literal = float(np.mean(np.abs(f - explainer.phi_batch(X, f).sum(axis=1))))
    return ExplainerDiagnostics(confidence_score(explainer, X), error_metric(explainer, X),
                                cs_c, em_c, literal, len(X))
