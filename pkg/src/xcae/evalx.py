"""Evaluation: classification metrics, attribution curves, log-odds,
sensitivity and top-1 agreement."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .numerics import SeededRng, ShapeError

PROB_CLAMP = 1e-12
KAPPA_GRID = tuple(range(0, 101, 10))


@dataclass
class ClassificationReport:
    acc: float
    precision: float
    recall: float
    f1: float
    auc: Optional[float]
    uar: float          # x100
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return asdict(self)


def roc_auc(scores, labels) -> Optional[float]:
    """Area under the ROC curve by the trapezoid rule over unique score thresholds."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y == 1)[last]
    fp = np.cumsum(y == 0)[last]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))


def confusion(pred, labels):
    pred = np.asarray(pred).astype(bool)
    y = np.asarray(labels).astype(bool)
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    tn = int(np.sum(~pred & ~y))
    fn = int(np.sum(~pred & y))
    return tp, fp, tn, fn


def report_from_predictions(pred, labels, scores=None) -> ClassificationReport:
    tp, fp, tn, fn = confusion(pred, labels)
    n = tp + fp + tn + fn
    if n == 0:
        raise ValueError("no samples")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    recalls = [r for r in (recall if tp + fn else None, tn / (tn + fp) if tn + fp else None)
               if r is not None]
    uar = 100.0 * sum(recalls) / len(recalls)
    auc = None
    if scores is not None:
        auc = roc_auc(scores, labels)
        if auc is None:
            warnings.warn("labels contain a single class; AUC is undefined", RuntimeWarning)
    return ClassificationReport((tp + tn) / n, precision, recall, f1, auc, uar, tp, fp, tn, fn)


def classify_metrics(scores, labels, tau: float) -> ClassificationReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ShapeError("scores and labels must be equal-length vectors")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    return report_from_predictions(scores > tau, labels, scores)


# ---------------------------------------------------------------------------
# Attribution curves
# ---------------------------------------------------------------------------

def top_order(phis: np.ndarray) -> np.ndarray:
    """Per row, feature indices by decreasing |phi|; ties keep the lower index first."""
    return np.argsort(-np.abs(np.asarray(phis, dtype=np.float64)), axis=1, kind="stable")


def n_selected(kappa: int, d: int) -> int:
    return (int(kappa) * d) // 100


def ablate(X: np.ndarray, order: np.ndarray, k: int, baseline: np.ndarray, mode: str) -> np.ndarray:
    """exclusion: top-k features set to baseline; inclusion: only top-k kept."""
    X = np.asarray(X, dtype=np.float64)
    top = np.zeros(X.shape, dtype=bool)
    if k > 0:
        np.put_along_axis(top, order[:, :k], True, axis=1)
    if mode == "exclusion":
        replace = top
    elif mode == "inclusion":
        replace = ~top
    else:
        raise ValueError(f"unknown ablation mode {mode!r}")
    return np.where(replace, baseline[None, :], X)


def _pred_class_prob(p: np.ndarray, cls: np.ndarray) -> np.ndarray:
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return np.where(cls == 1, p, 1.0 - p)


def log_odds_change(prob_fn: Callable, X: np.ndarray, X_removed: np.ndarray) -> float:
    """-(1/L) sum_i log[Pr(yhat_i | x_i removed) / Pr(yhat_i | x_i)], yhat_i from the intact input."""
    p_full = np.asarray(prob_fn(X), dtype=np.float64)
    cls = (p_full > 0.5).astype(np.int64)
    p_rem = np.asarray(prob_fn(X_removed), dtype=np.float64)
    ratio = np.log(_pred_class_prob(p_rem, cls)) - np.log(_pred_class_prob(p_full, cls))
    return float(-np.mean(ratio))


def log_odds(prob_fn: Callable, X, feature, baseline) -> float:
    """Log-odds change when feature(s) ``feature`` are mean-imputed on every row."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    baseline = np.asarray(baseline, dtype=np.float64)
    Xr = X.copy()
    Xr[:, feature] = baseline[feature]
    return log_odds_change(prob_fn, X, Xr)


def trapezoid_auc(kappa: Sequence[float], values: Sequence[float]) -> float:
    """Trapezoid area with kappa given in percent and integrated over [0, 1]."""
    k = np.asarray(kappa, dtype=np.float64) / 100.0
    v = np.asarray(values, dtype=np.float64)
    return float(np.sum((k[1:] - k[:-1]) * (v[1:] + v[:-1]) / 2.0))


@dataclass
class CurveReport:
    method: str
    kappa: list
    exclusion_acc: list = field(default_factory=list)
    inclusion_acc: list = field(default_factory=list)
    exclusion_logodds: list = field(default_factory=list)
    inclusion_logodds: list = field(default_factory=list)

    @property
    def exclusion_auc(self) -> float:
        return trapezoid_auc(self.kappa, self.exclusion_acc)

    @property
    def inclusion_auc(self) -> float:
        return trapezoid_auc(self.kappa, self.inclusion_acc)

    @property
    def exclusion_logodds_auc(self) -> Optional[float]:
        return trapezoid_auc(self.kappa, self.exclusion_logodds) if self.exclusion_logodds else None

    @property
    def inclusion_logodds_auc(self) -> Optional[float]:
        return trapezoid_auc(self.kappa, self.inclusion_logodds) if self.inclusion_logodds else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(exclusion_auc=self.exclusion_auc, inclusion_auc=self.inclusion_auc,
                 exclusion_logodds_auc=self.exclusion_logodds_auc,
                 inclusion_logodds_auc=self.inclusion_logodds_auc)
        return d


def _curve(mode, decide_fn, phis, X, labels, baseline, kappa_grid, prob_fn=None):
    X = np.asarray(X, dtype=np.float64)
    phis = np.asarray(phis, dtype=np.float64)
    if phis.shape != X.shape:
        raise ShapeError(f"attributions {phis.shape} do not match data {X.shape}")
    labels = np.asarray(labels).astype(np.int64)
    baseline = np.asarray(baseline, dtype=np.float64)
    order = top_order(phis)
    d = X.shape[1]
    acc, lo = [], []
    for kappa in kappa_grid:
        Xa = ablate(X, order, n_selected(kappa, d), baseline, mode)
        pred = np.asarray(decide_fn(Xa)).astype(np.int64)
        acc.append(float(np.mean(pred == labels)))
        if prob_fn is not None:
            lo.append(log_odds_change(prob_fn, X, Xa))
    return acc, lo


def exclusion_curve(decide_fn, phis, X, labels, baseline, kappa_grid=KAPPA_GRID, prob_fn=None):
    """Accuracy (and optional log-odds change) after removing each row's top-kappa% features."""
    return _curve("exclusion", decide_fn, phis, X, labels, baseline, kappa_grid, prob_fn)


def inclusion_curve(decide_fn, phis, X, labels, baseline, kappa_grid=KAPPA_GRID, prob_fn=None):
    """Accuracy (and optional log-odds change) keeping only each row's top-kappa% features."""
    return _curve("inclusion", decide_fn, phis, X, labels, baseline, kappa_grid, prob_fn)


def curve_report(method, decide_fn, phis, X, labels, baseline, kappa_grid=KAPPA_GRID,
                 prob_fn=None) -> CurveReport:
    ex, ex_lo = exclusion_curve(decide_fn, phis, X, labels, baseline, kappa_grid, prob_fn)
    inc, inc_lo = inclusion_curve(decide_fn, phis, X, labels, baseline, kappa_grid, prob_fn)
    return CurveReport(method, [int(k) for k in kappa_grid], ex, inc, ex_lo, inc_lo)


# ---------------------------------------------------------------------------
# Explanation robustness and agreement
# ---------------------------------------------------------------------------

def sensitivity(explainer_fn: Callable, x, eps: float = 0.05, n_perturb: int = 16,
                rng: Optional[SeededRng] = None) -> float:
    """max_j ||phi(x) - phi(x_j)|| / ||x - x_j|| over uniform draws x_j in the eps-ball."""
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if n_perturb < 1:
        raise ValueError("n_perturb must be >= 1")
    rng = rng or SeededRng(0)
    x = np.asarray(x, dtype=np.float64)
    d = x.size
    dirs = rng.normal((n_perturb, d))
    norms = np.linalg.norm(dirs, axis=1)
    radius = eps * rng.random(n_perturb) ** (1.0 / d)
    ok = norms > 0
    steps = np.zeros_like(dirs)
    steps[ok] = dirs[ok] / norms[ok, None] * radius[ok, None]
    dist = np.linalg.norm(steps, axis=1)
    keep = dist > 0
    if not np.any(keep):
        return 0.0
    Xj = x[None, :] + steps[keep]
    phi_x = np.asarray(explainer_fn(x[None, :]), dtype=np.float64).reshape(1, d)
    phi_j = np.asarray(explainer_fn(Xj), dtype=np.float64).reshape(-1, d)
    return float(np.max(np.linalg.norm(phi_j - phi_x, axis=1) / dist[keep]))


def top1(phis) -> np.ndarray:
    """argmax_j |phi_j| per row (first index on ties)."""
    return np.argmax(np.abs(np.atleast_2d(np.asarray(phis, dtype=np.float64))), axis=1)


def top1_agreement(phis_a, phis_b) -> float:
    a, b = top1(phis_a), top1(phis_b)
    if a.shape != b.shape:
        raise ShapeError("attribution sets cover different samples")
    return float(np.mean(a == b))


def agreement_matrix(methods: Mapping[str, np.ndarray]) -> dict:
    names = list(methods)
    return {a: {b: top1_agreement(methods[a], methods[b]) for b in names} for a in names}


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def write_curves_csv(path, reports: Sequence[CurveReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "curve", "kappa", "accuracy", "log_odds"])
        for r in reports:
            for curve, acc, lo in (("exclusion", r.exclusion_acc, r.exclusion_logodds),
                                   ("inclusion", r.inclusion_acc, r.inclusion_logodds)):
                for i, k in enumerate(r.kappa):
                    w.writerow([r.method, curve, k, repr(float(acc[i])),
                                repr(float(lo[i])) if lo else ""])


def write_metrics_csv(path, rows: Sequence[Mapping]) -> None:
    keys: list = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return "" if v is None else v


def write_json(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True, allow_nan=False, default=_jsonable)
        fh.write("\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
