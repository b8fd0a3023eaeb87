"""Glue shared by the CLI and the acceptance suite: split, normalize, train, score, evaluate."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import anomaly, evalx
from .dataset import (DataError, Dataset, RawTable, fit_normalizer, make_semi_supervised_split,
                      stratified_split)
from .numerics import derive_seed
from .sscae import SSCaeModel, TrainConfig, TrainHistory, train

SPLIT_FRACTIONS = (0.70, 0.15, 0.15)


@dataclass
class Splits:
    train: Dataset          # semi-supervised partition; may include unlabeled val/test rows
    val: Dataset
    test: Dataset
    train_rows: np.ndarray  # row indices into the raw table
    val_rows: np.ndarray
    test_rows: np.ndarray
    baseline: np.ndarray    # feature means of the train split (normalized space)

    @property
    def train_X(self) -> np.ndarray:
        """Features of the train split only (the unlabeled pool may hold val/test rows too)."""
        return self.train.X[:len(self.train_rows)]

    def counts(self) -> dict:
        return {"n_rows": int(len(self.train_rows) + len(self.val_rows) + len(self.test_rows)),
                "n_train": int(len(self.train_rows)), "n_val": int(len(self.val_rows)),
                "n_test": int(len(self.test_rows)), "n_labeled": int(self.train.n_labeled),
                "n_unlabeled": int(self.train.n_unlabeled)}


def make_splits(table: RawTable, seed: int, n_labeled="all", transductive: bool = True) -> Splits:
    """70/15/15 stratified split, min-max fit on train rows, ``n_labeled`` visible train labels.

    With ``transductive`` the features of validation and test rows join the
    unlabeled pool (their labels stay hidden from training).
    """
    if len(table) == 0:
        raise DataError("dataset is empty")
    y = table.labels()
    tr, va, te = stratified_split(y, SPLIT_FRACTIONS, derive_seed(seed, "split"))
    if len(tr) == 0 or len(va) == 0 or len(te) == 0:
        raise DataError("dataset too small for a 70/15/15 split")
    X = table.matrix()
    norm = fit_normalizer(X[tr], table.feature_names)
    Xn = norm.transform(X)
    names = list(table.feature_names)

    def _ds(rows):
        known = rows[~np.isnan(y[rows])]
        return Dataset(Xn[rows], y[rows], np.searchsorted(rows, known),
                       np.flatnonzero(np.isnan(y[rows])), names, norm, rows.copy())

    train_part = make_semi_supervised_split(_ds(tr), n_labeled, derive_seed(seed, "labels"))
    if transductive:
        rows = np.concatenate([tr, va, te])
        n_tr = len(tr)
        lab = train_part.labeled_idx
        unl = np.concatenate([train_part.unlabeled_idx, np.arange(n_tr, len(rows))])
        train_ds = Dataset(Xn[rows], y[rows], lab, np.sort(unl), names, norm, rows)
    else:
        train_ds = train_part
    baseline = Xn[tr].mean(axis=0)
    return Splits(train_ds, _ds(va), _ds(te), tr, va, te, baseline)


@dataclass
class RunResult:
    model: SSCaeModel
    history: TrainHistory
    score_cfg: anomaly.ScoreConfig
    test_report: evalx.ClassificationReport
    val_report: evalx.ClassificationReport
    timings: dict = field(default_factory=dict)


def labeled_view(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    known = np.flatnonzero(~np.isnan(ds.y))
    return ds.X[known], ds.y[known].astype(np.int64)


def train_and_evaluate(splits: Splits, cfg: TrainConfig, score_cfg: anomaly.ScoreConfig,
                       backend: Optional[str] = None) -> RunResult:
    t0 = time.perf_counter()
    model, hist = train(splits.train, cfg, validation=splits.val, backend=backend)
    t1 = time.perf_counter()
    resolved = anomaly.resolve_config(model, score_cfg, splits.val)
    Xv, yv = labeled_view(splits.val)
    Xt, yt = labeled_view(splits.test)
    if len(yt) == 0:
        raise DataError("test split has no labeled rows to evaluate")
    sv = anomaly.score_batch(model, Xv, resolved)
    st = anomaly.score_batch(model, Xt, resolved)
    val_rep = evalx.classify_metrics(sv.score, yv, resolved.tau)
    test_rep = evalx.classify_metrics(st.score, yt, resolved.tau)
    t2 = time.perf_counter()
    return RunResult(model, hist, resolved, test_rep, val_rep,
                     {"train_s": t1 - t0, "score_s": t2 - t1})
