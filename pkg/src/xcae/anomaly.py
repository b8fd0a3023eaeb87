"""Anomaly scoring: reconstruction error blended with the latent norm.

    score(x) = gamma * ||x - xhat||^2 + (1 - gamma) * ||z||_2,  anomaly iff score > tau
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .dataset import Dataset
from .numerics import ShapeError
from .sscae import SSCaeModel

POLICIES = ("fixed", "quantile")


@dataclass
class ScoreConfig:
    gamma: float = 0.5
    tau: float = math.inf
    threshold_policy: str = "quantile"
    q: float = 0.95

    def validate(self) -> list[str]:
        errs = []
        if not (0.0 <= self.gamma <= 1.0):
            errs.append(f"gamma must be in [0, 1], got {self.gamma}")
        if self.threshold_policy not in POLICIES:
            errs.append(f"threshold_policy must be one of {POLICIES}")
        elif self.threshold_policy == "quantile" and not (0.0 < self.q < 1.0):
            errs.append(f"q must be in (0, 1), got {self.q}")
        if math.isnan(self.tau):
            errs.append("tau must not be NaN")
        return errs

    def __post_init__(self):
        errs = self.validate()
        if errs:
            raise ValueError("; ".join(errs))


@dataclass(frozen=True)
class AnomalyScore:
    re: float
    latent_norm: float
    score: float
    is_anomaly: int


def blend(re, latent_norm, gamma: float):
    return gamma * re + (1.0 - gamma) * latent_norm


@dataclass
class ScoreBatch:
    """Column-oriented scores for many samples."""
    re: np.ndarray
    latent_norm: np.ndarray
    score: np.ndarray
    is_anomaly: np.ndarray

    def __len__(self):
        return len(self.score)

    def __getitem__(self, i) -> AnomalyScore:
        return AnomalyScore(float(self.re[i]), float(self.latent_norm[i]),
                            float(self.score[i]), int(self.is_anomaly[i]))


def score_batch(model: SSCaeModel, X, cfg: ScoreConfig) -> ScoreBatch:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ShapeError(f"model expects (n, {model.input_dim}) input, got {X.shape}")
    z, xhat, _ = model.encode_decode(X)
    re = np.sum((X - xhat) ** 2, axis=1)
    ln = np.sqrt(np.sum(z * z, axis=1))
    s = blend(re, ln, cfg.gamma)
    return ScoreBatch(re, ln, s, (s > cfg.tau).astype(np.int64))


def score(model: SSCaeModel, x, cfg: ScoreConfig) -> AnomalyScore:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("score expects a single feature vector")
    return score_batch(model, x[None, :], cfg)[0]


def blended_scores(model: SSCaeModel, X, gamma: float) -> np.ndarray:
    """Scalar anomaly score per row; the default function explained by Shapley methods."""
    return score_batch(model, X, ScoreConfig(gamma=gamma, threshold_policy="fixed")).score


def nearest_rank_quantile(values: Sequence[float], q: float) -> float:
    """Smallest v with at least ceil(q * n) values <= v."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("quantile of an empty set")
    if not (0.0 < q <= 1.0):
        raise ValueError("q must be in (0, 1]")
    k = max(1, math.ceil(round(q * v.size, 9)))
    return float(v[k - 1])


def calibrate_threshold(model: SSCaeModel, validation: Dataset, gamma: float, q: float) -> float:
    """tau = nearest-rank q-quantile of blended scores over normal validation rows."""
    normal = np.flatnonzero(validation.y == 0)
    if normal.size == 0:
        raise ValueError("validation set has no normal-labeled rows")
    return nearest_rank_quantile(blended_scores(model, validation.X[normal], gamma), q)


def resolve_config(model: SSCaeModel, cfg: ScoreConfig, validation: Optional[Dataset]) -> ScoreConfig:
    """Return ``cfg`` with tau filled in by the configured policy."""
    if cfg.threshold_policy == "fixed":
        return cfg
    if validation is None:
        raise ValueError("quantile threshold policy needs a validation set")
    tau = calibrate_threshold(model, validation, cfg.gamma, cfg.q)
    return ScoreConfig(cfg.gamma, tau, cfg.threshold_policy, cfg.q)


def write_score_csv(path, scores: ScoreBatch, sample_ids=None, labels=None) -> None:
    n = len(scores)
    ids = range(n) if sample_ids is None else sample_ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ["sample_id", "re", "latent_norm", "score", "is_anomaly"]
        if labels is not None:
            head.append("true_label")
        w.writerow(head)
        for i, sid in enumerate(ids):
            row = [sid, repr(float(scores.re[i])), repr(float(scores.latent_norm[i])),
                   repr(float(scores.score[i])), int(scores.is_anomaly[i])]
            if labels is not None:
                lab = labels[i]
                row.append("" if lab is None or (isinstance(lab, float) and math.isnan(lab))
                           else int(lab))
            w.writerow(row)


TARGETS = ("score", "proba")


def model_function(model: SSCaeModel, target: str = "score", gamma: float = 0.5):
    """The scalar explained by Shapley methods: blended score or the head probability."""
    if target == "score":
        return lambda X: blended_scores(model, X, gamma)
    if target == "proba":
        return model.predict_proba
    raise ValueError(f"unknown explained target {target!r} (expected one of {TARGETS})")
