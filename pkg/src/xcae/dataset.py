"""CSV ingestion, min-max normalization, labeled/unlabeled partitions and mixed batches."""
from __future__ import annotations

import configparser
import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .numerics import SeededRng


class DataError(ValueError):
    """Bad or inconsistent input data."""


_TRUE_LABELS = {"1", "1.0", "true", "yes", "anomaly", "anomalous"}
_FALSE_LABELS = {"0", "0.0", "false", "no", "normal"}


@dataclass
class SchemaConfig:
    label: Optional[str] = None
    context: list[str] = field(default_factory=list)
    features: list[str] = field(default_factory=list)  # empty -> all remaining columns

    @classmethod
    def from_file(cls, path) -> "SchemaConfig":
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise DataError(f"cannot read schema config {path}")
        if "schema" not in parser:
            raise DataError(f"schema config {path} has no [schema] section")
        sec = parser["schema"]

        def _names(key):
            raw = sec.get(key, "")
            return [s.strip() for s in raw.replace("\n", ",").split(",") if s.strip()]

        label = sec.get("label", "").strip() or None
        return cls(label=label, context=_names("context"), features=_names("features"))

    def to_dict(self) -> dict:
        return {"label": self.label, "context": list(self.context), "features": list(self.features)}


@dataclass
class RawRecord:
    context: dict
    values: tuple
    label: Optional[int]


@dataclass
class RawTable:
    feature_names: list[str]
    records: list[RawRecord]

    def __len__(self):
        return len(self.records)

    def matrix(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, len(self.feature_names)))
        return np.array([r.values for r in self.records], dtype=np.float64)

    def labels(self) -> np.ndarray:
        """Labels as float array, NaN where absent."""
        return np.array([np.nan if r.label is None else float(r.label) for r in self.records])


def _parse_label(cell: str, row: int, col: str) -> Optional[int]:
    text = cell.strip().lower()
    if text == "":
        return None
    if text in _TRUE_LABELS:
        return 1
    if text in _FALSE_LABELS:
        return 0
    raise DataError(f"row {row}, column '{col}': unknown label value {cell!r}")


def load_csv(path, schema: SchemaConfig | None = None) -> RawTable:
    path = Path(path)
    schema = schema or SchemaConfig()
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: no header row") from None
        missing = [c for c in ([schema.label] if schema.label else []) + schema.context
                   + schema.features if c not in header]
        if missing:
            raise DataError(f"{path}: columns not in header: {', '.join(missing)}")
        if schema.features:
            feats = list(schema.features)
        else:
            skip = set(schema.context) | ({schema.label} if schema.label else set())
            feats = [h for h in header if h not in skip and h != ""]
        col = {h: i for i, h in enumerate(header)}
        f_idx = [col[f] for f in feats]
        c_idx = [(c, col[c]) for c in schema.context]
        l_idx = col[schema.label] if schema.label else None

        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                raise DataError(f"row {lineno}: expected {len(header)} cells, got {len(row)}")
            vals = []
            for name, i in zip(feats, f_idx):
                try:
                    v = float(row[i])
                except ValueError:
                    raise DataError(
                        f"row {lineno}, column '{name}': cannot parse {row[i]!r} as a number"
                    ) from None
                if not math.isfinite(v):
                    raise DataError(f"row {lineno}, column '{name}': non-finite value")
                vals.append(v)
            label = _parse_label(row[l_idx], lineno, schema.label) if l_idx is not None else None
            records.append(RawRecord({c: row[i] for c, i in c_idx}, tuple(vals), label))
    return RawTable(feats, records)


@dataclass
class Normalizer:
    feature_names: list[str]
    mins: np.ndarray
    maxs: np.ndarray

    @property
    def scales(self) -> np.ndarray:
        span = self.maxs - self.mins
        return np.where(span > 0, span, 1.0)

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return np.clip((X - self.mins) / self.scales, 0.0, 1.0)

    def inverse(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z) * self.scales + self.mins

    def to_dict(self) -> dict:
        return {name: {"min": float(lo), "max": float(hi)}
                for name, lo, hi in zip(self.feature_names, self.mins, self.maxs)}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        names = list(d)
        return cls(names, np.array([d[n]["min"] for n in names], dtype=np.float64),
                   np.array([d[n]["max"] for n in names], dtype=np.float64))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=False))

    @classmethod
    def load(cls, path) -> "Normalizer":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_normalizer(records: RawTable | np.ndarray, feature_names: Sequence[str] | None = None) -> Normalizer:
    if isinstance(records, RawTable):
        X, feature_names = records.matrix(), records.feature_names
    else:
        X = np.asarray(records, dtype=np.float64)
    if X.shape[0] == 0:
        raise DataError("cannot fit a normalizer on zero rows")
    names = list(feature_names) if feature_names is not None else [f"f{i}" for i in range(X.shape[1])]
    return Normalizer(names, X.min(axis=0), X.max(axis=0))


@dataclass
class Dataset:
    """Normalized rows plus the labeled/unlabeled partition used for training.

    ``y`` keeps every known label (NaN if unknown) so evaluation can use them;
    only rows in ``labeled_idx`` expose their label to training.
    """
    X: np.ndarray
    y: np.ndarray
    labeled_idx: np.ndarray
    unlabeled_idx: np.ndarray
    feature_names: list[str]
    normalizer: Optional[Normalizer] = None
    row_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.labeled_idx = np.asarray(self.labeled_idx, dtype=np.int64)
        self.unlabeled_idx = np.asarray(self.unlabeled_idx, dtype=np.int64)
        if self.row_ids is None:
            self.row_ids = np.arange(len(self.X), dtype=np.int64)
        n = len(self.X)
        if len(self.y) != n:
            raise DataError("label vector length differs from row count")
        both = np.intersect1d(self.labeled_idx, self.unlabeled_idx)
        if both.size:
            raise DataError("labeled and unlabeled index sets overlap")
        if len(self.labeled_idx) + len(self.unlabeled_idx) != n:
            raise DataError("labeled and unlabeled index sets must cover every row")
        if self.labeled_idx.size and np.isnan(self.y[self.labeled_idx]).any():
            raise DataError("labeled rows must carry labels")

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def n_labeled(self) -> int:
        return len(self.labeled_idx)

    @property
    def n_unlabeled(self) -> int:
        return len(self.unlabeled_idx)

    def __len__(self):
        return len(self.X)

    def subset(self, rows: np.ndarray) -> "Dataset":
        """Rows ``rows`` with the partition restricted accordingly."""
        rows = np.asarray(rows, dtype=np.int64)
        pos = {int(r): i for i, r in enumerate(rows)}
        lab = np.array([pos[int(r)] for r in self.labeled_idx if int(r) in pos], dtype=np.int64)
        unl = np.setdiff1d(np.arange(len(rows)), lab)
        return Dataset(self.X[rows], self.y[rows], np.sort(lab), unl, list(self.feature_names),
                       self.normalizer, self.row_ids[rows])

    def feature_means(self) -> np.ndarray:
        return self.X.mean(axis=0)

    def save_snapshot(self, path, split: Optional[Sequence[str]] = None) -> None:
        lab = np.zeros(len(self), dtype=bool)
        lab[self.labeled_idx] = True
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            cols = ["row_id"] + list(self.feature_names) + ["label", "labeled"]
            if split is not None:
                cols.append("split")
            w.writerow(cols)
            for i in range(len(self)):
                label = "" if np.isnan(self.y[i]) else str(int(self.y[i]))
                row = [int(self.row_ids[i])] + [repr(float(v)) for v in self.X[i]]
                row += [label, int(lab[i])]
                if split is not None:
                    row.append(split[i])
                w.writerow(row)


def normalize(records: RawTable, normalizer: Normalizer) -> Dataset:
    X = normalizer.transform(records.matrix())
    y = records.labels()
    known = np.flatnonzero(~np.isnan(y))
    unknown = np.flatnonzero(np.isnan(y))
    return Dataset(X, y, known, unknown, list(records.feature_names), normalizer)


def _stratified_counts(class_sizes: Sequence[int], total: int) -> list[int]:
    """Largest-remainder allocation of ``total`` proportional to class sizes."""
    n = sum(class_sizes)
    exact = [total * c / n for c in class_sizes]
    counts = [min(int(math.floor(e)), c) for e, c in zip(exact, class_sizes)]
    order = sorted(range(len(exact)), key=lambda k: (-(exact[k] - math.floor(exact[k])), k))
    short = total - sum(counts)
    while short > 0:
        moved = False
        for k in order:
            if short == 0:
                break
            if counts[k] < class_sizes[k]:
                counts[k] += 1
                short -= 1
                moved = True
        if not moved:
            break
    return counts


def make_semi_supervised_split(dataset: Dataset, n_labeled: int | str, seed: int) -> Dataset:
    """Keep ``n_labeled`` class-stratified labels visible; hide the rest."""
    known = np.flatnonzero(~np.isnan(dataset.y))
    if n_labeled == "all":
        n_labeled = len(known)
    n_labeled = int(n_labeled)
    if n_labeled < 0 or n_labeled > len(known):
        raise DataError(f"requested {n_labeled} labels but only {len(known)} are available")
    rng = SeededRng(seed).spawn("semi-supervised-split")
    classes = [known[dataset.y[known] == c] for c in (0.0, 1.0)]
    counts = _stratified_counts([len(c) for c in classes], n_labeled)
    picked = []
    for members, k in zip(classes, counts):
        if k:
            picked.append(members[rng.choice_without_replacement(len(members), k)])
    lab = np.sort(np.concatenate(picked)) if picked else np.zeros(0, dtype=np.int64)
    unl = np.setdiff1d(np.arange(len(dataset)), lab)
    return Dataset(dataset.X, dataset.y, lab, unl, list(dataset.feature_names),
                   dataset.normalizer, dataset.row_ids)


def stratified_split(labels: np.ndarray, fractions: Sequence[float], seed: int) -> list[np.ndarray]:
    """Split row indices into len(fractions) groups, stratified on ``labels`` (NaN is its own stratum)."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError("split fractions must sum to 1")
    labels = np.asarray(labels, dtype=np.float64)
    rng = SeededRng(seed).spawn("train-val-test")
    key = np.where(np.isnan(labels), -1.0, labels)
    groups: list[list[np.ndarray]] = [[] for _ in fractions]
    for stratum in np.unique(key):
        members = np.flatnonzero(key == stratum)
        members = members[rng.permutation(len(members))]
        counts = _stratified_counts([round(f * 1_000_000) for f in fractions], len(members))
        start = 0
        for g, c in enumerate(counts):
            groups[g].append(members[start:start + c])
            start += c
    return [np.sort(np.concatenate(g)) if g else np.zeros(0, dtype=np.int64) for g in groups]


def labeled_quota(batch_size: int, n_labeled: int, n_total: int) -> int:
    if n_labeled == 0 or n_total == 0:
        return 0
    return max(1, int(round(batch_size * n_labeled / n_total)))


@dataclass
class MiniBatch:
    X: np.ndarray
    y: np.ndarray          # 0 on unlabeled rows; only meaningful where alpha > 0
    alpha: np.ndarray
    rows: np.ndarray
    n_labeled: int

    @property
    def labeled_mask(self) -> np.ndarray:
        m = np.zeros(len(self.rows), dtype=bool)
        m[:self.n_labeled] = True
        return m


def sample_batch(dataset: Dataset, b_l: int, b_u: int, lam: float, rng: SeededRng) -> MiniBatch:
    """Labeled rows first, then unlabeled rows; each drawn without replacement."""
    if len(dataset) == 0:
        raise DataError("cannot sample from an empty dataset")
    if b_l + b_u <= 0:
        raise DataError("batch size must be positive")
    n_l, n_u = dataset.n_labeled, dataset.n_unlabeled
    want = b_l + b_u
    b_l = min(b_l, n_l)
    b_u = min(want - b_l, n_u)
    b_l = min(want - b_u, n_l)
    lab = dataset.labeled_idx[rng.choice_without_replacement(n_l, b_l)] if b_l else np.zeros(0, np.int64)
    unl = dataset.unlabeled_idx[rng.choice_without_replacement(n_u, b_u)] if b_u else np.zeros(0, np.int64)
    rows = np.concatenate([lab, unl])
    y = np.zeros(len(rows))
    y[:b_l] = dataset.y[lab]
    alpha = np.zeros(len(rows))
    alpha[:b_l] = lam
    return MiniBatch(dataset.X[rows], y, alpha, rows, b_l)


# Column names used by the public UE KPI export and common variants. The real
# file could not be inspected offline, so the schema is inferred from the header.
LABEL_CANDIDATES = ("Viavi.UE.anomalies", "anomalies", "Anomaly", "anomaly", "label", "Label",
                    "is_anomaly")
CONTEXT_CANDIDATES = ("measTimeStampRf", "timestamp", "Timestamp", "nrCellIdentity",
                      "NRCellIdentity", "du-id", "DU-id", "ue-id", "UE-id", "ue_id", "du_id",
                      "RF.serving.Id", "sample_id")


def infer_schema(path, probe_rows: int = 200) -> SchemaConfig:
    """Label from a known-name list, context = known id/time columns plus any
    column that does not parse as a number in the first ``probe_rows`` rows."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: no header row") from None
        rows = [r for _, r in zip(range(probe_rows), reader)]
    label = next((c for c in LABEL_CANDIDATES if c in header), None)
    context = [c for c in header if c in CONTEXT_CANDIDATES]
    for i, name in enumerate(header):
        if name in context or name == label or name == "":
            continue
        for r in rows:
            if i >= len(r):
                continue
            try:
                float(r[i])
            except ValueError:
                context.append(name)
                break
    return SchemaConfig(label=label, context=context, features=[])
