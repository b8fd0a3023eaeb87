import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from xcae import kernels
from xcae.fastshapc import (ExplainerModel, ExplainerTrainConfig, IncompatibleArtifactError,
                            confidence_score, error_metric, explain, explainer_layout,
                            normalize_phi, sample_coalitions, train_explainer)
from xcae.numerics import SeededRng
from xcae.shapley import CoalitionMask, value_function

finite = st.floats(-1e3, 1e3, allow_nan=False)


@pytest.fixture(scope="module")
def short_explainer(linear):
    cfg = ExplainerTrainConfig(steps=3000, lr=1e-2, batch_size=4, eval_n=64)
    ex, diag, hist = train_explainer(linear.f, linear.X, cfg, linear.vf, X_eval=linear.X_hold)
    return ex, diag, hist


@given(arrays(np.float64, (5, 6), elements=finite), arrays(np.float64, 5, elements=finite))
@settings(max_examples=100, deadline=None)
def test_normalization_is_idempotent_and_efficient(phi, delta):
    once = normalize_phi(phi, delta)
    assert np.allclose(once.sum(axis=1), delta, atol=1e-9 * (1 + np.abs(phi).sum()))
    assert np.allclose(normalize_phi(once, delta), once, atol=1e-9 * (1 + np.abs(phi).max()))


def test_efficiency_over_random_inputs(short_explainer, linear):
    ex, *_ = short_explainer
    X = SeededRng(99).uniform(-2.0, 3.0, (1000, linear.d))
    phi = ex.phi_batch(X)
    v_full = linear.f(X)
    v_empty = value_function(linear.f, X[0], CoalitionMask.empty(linear.d), linear.vf)
    assert np.max(np.abs(phi.sum(axis=1) - (v_full - v_empty))) < 1e-9


def test_short_training_learns_something(short_explainer, linear):
    ex, diag, hist = short_explainer
    rm = hist.running_mean(500)
    assert rm[-1] < rm[0]
    err = np.abs(ex.phi_batch(linear.X_hold) - linear.exact(linear.X_hold)).max()
    assert err < 0.5
    assert diag.cs >= 0 and diag.em >= 0 and diag.cs <= math.sqrt(diag.em) + 1e-12


def test_metrics_jensen(short_explainer, linear):
    ex, *_ = short_explainer
    ex_raw = ExplainerModel(ex.layout, ex.params, False, ex.v_empty, ex.explained_fn)
    cs, em = confidence_score(ex_raw, linear.X_hold), error_metric(ex_raw, linear.X_hold)
    assert cs > 0 and cs <= math.sqrt(em) + 1e-12


def test_training_is_deterministic(linear):
    cfg = ExplainerTrainConfig(steps=300, eval_n=16)
    a, *_ = train_explainer(linear.f, linear.X, cfg, linear.vf)
    b, *_ = train_explainer(linear.f, linear.X, cfg, linear.vf)
    assert a.to_json() == b.to_json()


@pytest.mark.parametrize("opt,norm", [("sgd", True), ("sgd", False), ("adam", True)])
def test_backends_agree_on_training(linear, opt, norm):
    if "cython" not in kernels.BACKENDS:
        pytest.skip("compiled backend not built")
    cfg = ExplainerTrainConfig(steps=200, batch_size=3, optimizer=opt, normalize=norm, eval_n=8,
                               hidden=16)
    a, _, ha = train_explainer(linear.f, linear.X, cfg, linear.vf, backend="python")
    b, _, hb = train_explainer(linear.f, linear.X, cfg, linear.vf, backend="cython")
    assert np.max(np.abs(a.params - b.params)) < 1e-10
    assert np.allclose(ha.losses, hb.losses, rtol=1e-9, atol=1e-14)


def test_kernel_distribution_size_frequencies():
    d, n = 6, 60_000
    S = sample_coalitions(d, n, "shapley-kernel", SeededRng(0))
    sizes = S.sum(axis=1)
    k = np.arange(1, d)
    p = (d - 1) / (k * (d - k))
    p /= p.sum()
    freq = np.array([(sizes == i).mean() for i in k])
    assert np.all(np.abs(freq - p) < 0.01)
    assert sizes.min() >= 1 and sizes.max() <= d - 1


def test_uniform_nonempty_distribution():
    S = sample_coalitions(4, 30_000, "uniform-nonempty", SeededRng(1))
    assert S.any(axis=1).all()
    codes = (S * (1 << np.arange(4))).sum(axis=1)
    counts = np.bincount(codes, minlength=16)[1:]
    assert np.all(np.abs(counts / len(S) - 1 / 15) < 0.01)


def test_persistence_and_compatibility(short_explainer, linear, tmp_path):
    ex, *_ = short_explainer
    ex.explained_ref = {"model_sha256": "abc", "target": "score"}
    ex.save(tmp_path / "e.json")
    back = ExplainerModel.load(tmp_path / "e.json", linear.f, expected_ref={"model_sha256": "abc"})
    assert np.array_equal(back.phi_batch(linear.X_hold), ex.phi_batch(linear.X_hold))
    with pytest.raises(IncompatibleArtifactError, match="model_sha256"):
        ExplainerModel.load(tmp_path / "e.json", linear.f, expected_ref={"model_sha256": "zzz"})


def test_explain_single_row_method_tag(short_explainer, linear):
    ex, *_ = short_explainer
    a = explain(ex, linear.X_hold[0])
    assert a.method == "fastshap_c" and a.phi.shape == (8,)


def test_invalid_config():
    errs = ExplainerTrainConfig(lr=-1, steps=0, subset_distribution="x", optimizer="lbfgs").validate()
    assert len(errs) == 4


def test_layout_shape():
    lay = explainer_layout(8, 16, 2)
    assert lay.dims == (8, 16, 16, 8) and lay.activations[-1] == "linear"
