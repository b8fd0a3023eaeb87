"""Synthetic UE radio-KPI table with the same shape as the public O-RAN set:
20 numeric features, id/time context columns and a 0/1 anomaly label.

Normal UEs get RSRP from distance-based path loss to the nearest of three
sites plus shadowing; SINR and RSRQ follow from serving versus neighbour
power, and throughput from SINR and cell load. Anomalies are either coverage
holes (RF drop across RSRP/RSRQ/SINR) or throughput collapse under high PRB load.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .dataset import SchemaConfig
from .numerics import SeededRng

LABEL = "Viavi.UE.anomalies"
CONTEXT = ["measTimeStampRf", "nrCellIdentity", "du-id", "ue-id"]
FEATURES = [
    "RF.serving.RSRP", "RF.serving.RSRQ", "RF.serving.RSSINR",
    "rsrp_nb0", "rsrq_nb0", "rssinr_nb0",
    "rsrp_nb1", "rsrq_nb1", "rssinr_nb1",
    "rsrp_nb2", "rsrq_nb2", "rssinr_nb2",
    "prb_usage", "RRU.PrbUsedDl", "RRU.PrbUsedUl",
    "DRB.UEThpDl", "DRB.UEThpUl", "targetTput", "x", "y",
]
SITES = np.array([[250.0, 250.0], [750.0, 300.0], [500.0, 750.0], [900.0, 900.0]])


def schema() -> SchemaConfig:
    return SchemaConfig(label=LABEL, context=list(CONTEXT), features=list(FEATURES))


def _db_sum(db: np.ndarray, axis: int) -> np.ndarray:
    return 10.0 * np.log10(np.sum(10.0 ** (db / 10.0), axis=axis))


def generate(n: int = 10_000, anomaly_rate: float = 0.25, seed: int = 0):
    """Returns (X (n, 20), labels (n,), context dict of columns)."""
    rng = SeededRng(seed)
    pos = rng.uniform(0.0, 1000.0, (n, 2))
    dist = np.linalg.norm(pos[:, None, :] - SITES[None, :, :], axis=2) + 10.0
    rx = -40.0 - 30.0 * np.log10(dist) + 4.0 * rng.normal((n, len(SITES)))
    order = np.argsort(-rx, axis=1, kind="stable")
    rx = np.take_along_axis(rx, order, axis=1)
    serving, nb = rx[:, 0], rx[:, 1:]
    noise = -105.0
    interf = _db_sum(np.concatenate([nb, np.full((n, 1), noise)], axis=1), axis=1)
    sinr = serving - interf + 1.5 * rng.normal(n)
    rsrq = -10.0 + 0.35 * sinr + 0.8 * rng.normal(n)
    nb_sinr = nb - _db_sum(np.stack([serving, np.full(n, noise)], axis=1), axis=1)[:, None]
    nb_rsrq = -10.0 + 0.35 * nb_sinr + 0.8 * rng.normal((n, 3))
    load = np.clip(20.0 + 60.0 * rng.random(n) + 5.0 * rng.normal(n), 1.0, 100.0)
    prb_dl = np.clip(load * 0.9 + 3.0 * rng.normal(n), 0.0, 100.0)
    prb_ul = np.clip(load * 0.4 + 3.0 * rng.normal(n), 0.0, 100.0)
    target = np.round(5.0 + 45.0 * rng.random(n))
    capacity = 20.0 * np.log2(1.0 + 10.0 ** (np.clip(sinr, -10, 30) / 10.0)) * (1.2 - load / 100.0)
    thp_dl = np.minimum(target, capacity) * (1.0 + 0.05 * rng.normal(n))
    thp_ul = 0.3 * thp_dl * (1.0 + 0.1 * rng.normal(n))

    n_anom = int(round(anomaly_rate * n))
    anomalous = np.zeros(n, dtype=bool)
    anomalous[rng.choice_without_replacement(n, n_anom)] = True
    kind = rng.random(n) < 0.6
    hole = anomalous & kind
    choke = anomalous & ~kind
    drop = 8.0 + 8.0 * rng.random(n)
    serving = np.where(hole, serving - drop, serving)
    sinr = np.where(hole, sinr - 0.8 * drop, sinr)
    rsrq = np.where(hole, rsrq - 0.3 * drop, rsrq)
    thp_dl = np.where(hole, thp_dl * (0.2 + 0.3 * rng.random(n)), thp_dl)
    prb_dl = np.where(choke, np.clip(prb_dl + 15.0 + 10.0 * rng.random(n), 0, 100), prb_dl)
    thp_dl = np.where(choke, thp_dl * (0.1 + 0.3 * rng.random(n)), thp_dl)
    thp_ul = np.where(anomalous, thp_ul * 0.5, thp_ul)

    X = np.column_stack([
        serving, rsrq, sinr,
        nb[:, 0], nb_rsrq[:, 0], nb_sinr[:, 0],
        nb[:, 1], nb_rsrq[:, 1], nb_sinr[:, 1],
        nb[:, 2], nb_rsrq[:, 2], nb_sinr[:, 2],
        load, prb_dl, prb_ul, np.maximum(thp_dl, 0.0), np.maximum(thp_ul, 0.0), target,
        pos[:, 0], pos[:, 1],
    ])
    X = np.round(X, 3)
    cell = order[:, 0]
    context = {
        "measTimeStampRf": [f"2024-01-01T00:{(i // 60) % 60:02d}:{i % 60:02d}" for i in range(n)],
        "nrCellIdentity": [f"c{int(c) + 1}" for c in cell],
        "du-id": [str(1000 + int(c) // 2) for c in cell],
        "ue-id": [f"ue{i % 500:03d}" for i in range(n)],
    }
    return X, anomalous.astype(np.int64), context


def write_csv(path, n: int = 10_000, anomaly_rate: float = 0.25, seed: int = 0) -> Path:
    X, y, ctx = generate(n, anomaly_rate, seed)
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CONTEXT + FEATURES + [LABEL])
        for i in range(n):
            w.writerow([ctx[c][i] for c in CONTEXT] + [repr(float(v)) for v in X[i]] + [int(y[i])])
    return path
