import csv
import json

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from xcae import evalx
from xcae.numerics import SeededRng

labels_st = st.lists(st.integers(0, 1), min_size=2, max_size=60)


def mann_whitney_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    gt = (pos[:, None] > neg[None, :]).mean()
    eq = (pos[:, None] == neg[None, :]).mean()
    return gt + 0.5 * eq


@given(labels_st, st.integers(0, 10**6))
@settings(max_examples=100, deadline=None)
def test_auc_matches_rank_statistic(y, seed):
    y = np.array(y)
    assume(0 < y.sum() < len(y))
    s = np.round(SeededRng(seed).normal(len(y)), 1)  # rounding forces ties
    assert evalx.roc_auc(s, y) == pytest.approx(mann_whitney_auc(s, y), abs=1e-12)


@given(labels_st, st.integers(0, 10**6))
@settings(max_examples=100, deadline=None)
def test_auc_invariant_to_monotone_transform(y, seed):
    y = np.array(y)
    assume(0 < y.sum() < len(y))
    s = SeededRng(seed).normal(len(y))
    assert evalx.roc_auc(np.exp(3 * s) + 7, y) == pytest.approx(evalx.roc_auc(s, y), abs=1e-12)


def test_auc_single_class_is_none_with_warning():
    assert evalx.roc_auc([0.1, 0.2], [1, 1]) is None
    with pytest.warns(RuntimeWarning):
        r = evalx.classify_metrics(np.array([0.1, 0.9]), np.array([0, 0]), 0.5)
    assert r.auc is None


@given(labels_st, st.lists(st.booleans(), min_size=60, max_size=60), st.integers(2, 5))
@settings(max_examples=100, deadline=None)
def test_uar_invariant_to_duplication(y, pred, k):
    y = np.array(y)
    pred = np.array(pred[:len(y)])
    a = evalx.report_from_predictions(pred, y)
    b = evalx.report_from_predictions(np.tile(pred, k), np.tile(y, k))
    assert a.uar == pytest.approx(b.uar)
    assert a.acc == pytest.approx(b.acc)


def test_classification_report_values():
    y = np.array([1, 1, 1, 0, 0, 0, 0, 0])
    s = np.array([0.9, 0.8, 0.2, 0.7, 0.1, 0.1, 0.3, 0.0])
    r = evalx.classify_metrics(s, y, 0.5)
    assert (r.tp, r.fp, r.tn, r.fn) == (2, 1, 4, 1)
    assert r.precision == pytest.approx(2 / 3) and r.recall == pytest.approx(2 / 3)
    assert r.uar == pytest.approx(100 * (2 / 3 + 4 / 5) / 2)
    assert r.acc == pytest.approx(6 / 8)


def test_classify_rejects_bad_labels():
    with pytest.raises(ValueError):
        evalx.classify_metrics(np.array([0.1, 0.2]), np.array([0, 2]), 0.5)


def test_trapezoid_exact_on_piecewise_linear():
    kappa = [0, 10, 50, 100]
    vals = [1.0, 0.5, 0.5, 0.0]
    expected = 0.1 * 0.75 + 0.4 * 0.5 + 0.5 * 0.25
    assert evalx.trapezoid_auc(kappa, vals) == pytest.approx(expected, abs=1e-12)


def test_top_order_ties_prefer_lower_index():
    assert evalx.top_order(np.array([[1.0, -2.0, 2.0, 0.0]])).tolist() == [[1, 2, 0, 3]]


def test_n_selected_floor():
    assert [evalx.n_selected(k, 20) for k in (0, 10, 33, 100)] == [0, 2, 6, 20]
    assert evalx.n_selected(30, 8) == 2


class SparseLinear:
    """Decision w.x > w.mu with two dominant features, so true importance is known."""

    def __init__(self, n=400, seed=0):
        r = SeededRng(seed)
        self.w = np.array([2.0, -1.5, 0.05, 0.0, 0.02, 0.0, -0.03, 0.0])
        self.X = r.random((n, 8))
        self.mu = np.full(8, 0.5)
        self.t = self.w @ self.mu
        self.y = self.decide(self.X)
        self.phi = self.w * (self.X - self.mu)

    def decide(self, Z):
        return (Z @ self.w > self.t).astype(int)

    def prob(self, Z):
        return 1.0 / (1.0 + np.exp(-4.0 * (Z @ self.w - self.t)))


@pytest.fixture(scope="module")
def sparse():
    return SparseLinear()


def test_curve_endpoints(sparse):
    acc_in, _ = evalx.inclusion_curve(sparse.decide, sparse.phi, sparse.X, sparse.y, sparse.mu)
    acc_ex, _ = evalx.exclusion_curve(sparse.decide, sparse.phi, sparse.X, sparse.y, sparse.mu)
    full = np.mean(sparse.decide(sparse.X) == sparse.y)
    all_baseline = np.mean(sparse.decide(np.tile(sparse.mu, (len(sparse.X), 1))) == sparse.y)
    assert acc_in[-1] == full and acc_ex[0] == full
    assert acc_in[0] == all_baseline and acc_ex[-1] == all_baseline


def test_informative_beats_random(sparse):
    grid = evalx.KAPPA_GRID
    rnd = SeededRng(5).normal(sparse.phi.shape)
    inf_ex, _ = evalx.exclusion_curve(sparse.decide, sparse.phi, sparse.X, sparse.y, sparse.mu)
    rnd_ex, _ = evalx.exclusion_curve(sparse.decide, rnd, sparse.X, sparse.y, sparse.mu)
    i30 = grid.index(30)
    assert inf_ex[i30] <= rnd_ex[i30]
    inf_in, _ = evalx.inclusion_curve(sparse.decide, sparse.phi, sparse.X, sparse.y, sparse.mu)
    assert inf_in[i30] >= 0.9 * inf_in[-1]


def test_log_odds_sign(sparse):
    # for rows predicted anomalous, feature 0 above its mean pushes the probability up;
    # mean-imputing it lowers the predicted-class probability, so the change is positive
    rows = (sparse.decide(sparse.X) == 1) & (sparse.X[:, 0] > 0.5)
    assert evalx.log_odds(sparse.prob, sparse.X[rows], 0, sparse.mu) > 0
    assert evalx.log_odds(sparse.prob, sparse.X, 3, sparse.mu) == pytest.approx(0.0, abs=1e-12)


def test_log_odds_clamped_for_saturated_probabilities():
    prob = lambda Z: np.where(Z[:, 0] > 0.5, 1.0, 0.0)  # noqa: E731
    X = np.array([[0.9, 0.0], [0.1, 0.0]])
    assert np.isfinite(evalx.log_odds(prob, X, 0, np.array([0.0, 0.0])))


def test_sensitivity_linear_and_constant():
    W = SeededRng(0).normal((4, 4))
    lin = lambda Z: np.atleast_2d(Z) @ W  # noqa: E731
    s = evalx.sensitivity(lin, np.zeros(4), eps=0.05, n_perturb=64, rng=SeededRng(1))
    assert s <= np.linalg.norm(W, 2) + 1e-9
    assert s >= 0.3 * np.linalg.norm(W, 2)
    const = lambda Z: np.ones((len(np.atleast_2d(Z)), 4))  # noqa: E731
    assert evalx.sensitivity(const, np.zeros(4), rng=SeededRng(2)) == 0.0


def test_top1_agreement_matrix():
    a = np.array([[3.0, 1.0], [0.0, -2.0]])
    b = np.array([[0.1, 1.0], [0.0, 5.0]])
    m = evalx.agreement_matrix({"a": a, "b": b})
    assert m["a"]["a"] == 1.0 and m["b"]["b"] == 1.0
    assert m["a"]["b"] == 0.5 == m["b"]["a"]


def test_reports_written(sparse, tmp_path):
    rep = evalx.curve_report("kernel", sparse.decide, sparse.phi, sparse.X, sparse.y, sparse.mu,
                             prob_fn=sparse.prob)
    evalx.write_curves_csv(tmp_path / "c.csv", [rep])
    rows = list(csv.DictReader(open(tmp_path / "c.csv")))
    assert len(rows) == 2 * len(evalx.KAPPA_GRID)
    evalx.write_json(tmp_path / "m.json", {"r": rep.to_dict(), "x": np.float64(1.5)})
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["x"] == 1.5 and doc["r"]["inclusion_auc"] == pytest.approx(rep.inclusion_auc)
