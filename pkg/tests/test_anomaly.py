import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_model, small_relu_layout
from xcae import anomaly
from xcae.anomaly import ScoreConfig
from xcae.dataset import Dataset
from xcae.numerics import SeededRng, ShapeError


@pytest.fixture
def model():
    return random_model(small_relu_layout(), 0)


def test_score_matches_hand_computation(model):
    x = SeededRng(1).random(5)
    z, xhat, _ = model.encode_decode(x[None, :])
    s = anomaly.score(model, x, ScoreConfig(gamma=0.3, tau=0.0, threshold_policy="fixed"))
    re = float(np.sum((x - xhat[0]) ** 2))
    ln = float(np.linalg.norm(z[0]))
    assert s.re == pytest.approx(re, rel=1e-14)
    assert s.latent_norm == pytest.approx(ln, rel=1e-14)
    assert s.score == pytest.approx(0.3 * re + 0.7 * ln, rel=1e-14)


@pytest.mark.parametrize("gamma,col", [(1.0, "re"), (0.0, "latent_norm")])
def test_gamma_endpoints(model, gamma, col):
    X = SeededRng(2).random((20, 5))
    b = anomaly.score_batch(model, X, ScoreConfig(gamma=gamma, tau=1.0, threshold_policy="fixed"))
    assert np.array_equal(b.score, getattr(b, col))


def test_perfect_reconstruction_scores_zero_re():
    # identity decoder: a linear layout whose weights reproduce the input exactly
    from xcae.sscae import Layout, SSCaeModel
    lay = Layout((3, 3, 3), ("linear", "linear"), n_enc=1)
    p = np.zeros(lay.n_params)
    off = lay.offsets
    p[off[0]:off[0] + 9] = np.eye(3).ravel()
    p[off[1]:off[1] + 9] = np.eye(3).ravel()
    m = SSCaeModel(lay, p)
    b = anomaly.score_batch(m, SeededRng(0).random((10, 3)), ScoreConfig(gamma=1.0, tau=0.5,
                                                                          threshold_policy="fixed"))
    assert np.all(b.re == 0.0) and not b.is_anomaly.any()


def test_decision_is_strict(model):
    x = SeededRng(3).random(5)
    s = anomaly.score(model, x, ScoreConfig(gamma=0.5, tau=0.0, threshold_policy="fixed")).score
    at = anomaly.score(model, x, ScoreConfig(gamma=0.5, tau=s, threshold_policy="fixed"))
    assert at.is_anomaly == 0


def test_shape_check(model):
    with pytest.raises(ShapeError):
        anomaly.score_batch(model, np.zeros((2, 4)), ScoreConfig(tau=1.0, threshold_policy="fixed"))


@pytest.mark.parametrize("kw", [dict(gamma=1.5), dict(q=1.0), dict(threshold_policy="median"),
                                dict(tau=float("nan"))])
def test_invalid_score_config(kw):
    with pytest.raises(ValueError):
        ScoreConfig(**kw)


def test_nearest_rank_quantile_examples():
    v = list(range(1, 21))  # 1..20
    assert anomaly.nearest_rank_quantile(v, 0.95) == 19
    assert anomaly.nearest_rank_quantile(v, 0.05) == 1
    assert anomaly.nearest_rank_quantile([5.0], 0.5) == 5.0


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=200), st.floats(0.01, 0.99))
@settings(max_examples=100, deadline=None)
def test_nearest_rank_quantile_property(vals, q):
    t = anomaly.nearest_rank_quantile(vals, q)
    assert t in vals
    frac_le = np.mean(np.asarray(vals) <= t)
    assert frac_le >= q - 1e-9
    assert np.mean(np.asarray(vals) < t) < q + 1e-9


def test_calibration_uses_normal_validation_rows(model):
    r = SeededRng(4)
    X = r.random((200, 5))
    y = np.r_[np.zeros(150), np.ones(50)]
    val = Dataset(X, y, np.arange(200), np.zeros(0, np.int64), list("abcde"))
    cfg = anomaly.resolve_config(model, ScoreConfig(gamma=0.5, q=0.9), val)
    normal_scores = anomaly.blended_scores(model, X[:150], 0.5)
    assert cfg.tau == anomaly.nearest_rank_quantile(normal_scores, 0.9)
    assert np.mean(normal_scores > cfg.tau) <= 0.1


def test_calibration_without_normals_fails(model):
    val = Dataset(np.zeros((3, 5)), np.ones(3), np.arange(3), np.zeros(0, np.int64), list("abcde"))
    with pytest.raises(ValueError, match="normal"):
        anomaly.resolve_config(model, ScoreConfig(), val)


def test_write_score_csv(model, tmp_path):
    X = SeededRng(5).random((4, 5))
    b = anomaly.score_batch(model, X, ScoreConfig(tau=1.0, threshold_policy="fixed"))
    anomaly.write_score_csv(tmp_path / "s.csv", b, [10, 11, 12, 13], [0, 1, math.nan, 1])
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert len(rows) == 4
    assert list(rows[0]) == ["sample_id", "re", "latent_norm", "score", "is_anomaly", "true_label"]
    assert rows[2]["true_label"] == "" and rows[0]["sample_id"] == "10"
    assert float(rows[1]["score"]) == b.score[1]


def test_model_function_targets(model):
    X = SeededRng(6).random((3, 5))
    assert np.array_equal(anomaly.model_function(model, "proba")(X), model.predict_proba(X))
    assert np.array_equal(anomaly.model_function(model, "score", 0.2)(X),
                          anomaly.blended_scores(model, X, 0.2))
    with pytest.raises(ValueError):
        anomaly.model_function(model, "logit")
