import numpy as np
import pytest

from conftest import make_batch, random_model, small_relu_layout, small_sigmoid_layout
from xcae import kernels
from xcae.dataset import Dataset
from xcae.numerics import SeededRng
from xcae.sscae import (DivergenceError, SSCaeModel, TrainConfig, backward, encoder_jacobian,
                        forward, init_model, loss_terms, paper_layout, train)


def fd_gradient(model, batch, lambda_c, backend, h=1e-5):
    p0 = model.params.copy()
    g = np.zeros_like(p0)
    for i in range(p0.size):
        for sgn in (1, -1):
            model.params = p0.copy()
            model.params[i] += sgn * h
            g[i] += sgn * loss_terms(model, batch, lambda_c, backend)["total"]
    model.params = p0
    return g / (2 * h)


def grad_rel_error(a, f):
    """Elementwise |a - f| / max(|a|, |f|), with a 1e-6 floor for near-zero entries."""
    return float(np.max(np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-6)))


def _fd_batch(seed, d=6, n=5):
    r = SeededRng(seed + 100)
    X = r.random((n, d))
    y = (r.random(n) > 0.5).astype(float)
    alpha = np.array([1.0, 0.5, 0.0, 1.0, 0.0])[:n]
    return make_batch(X, y * (alpha > 0), alpha)


def test_paper_layout_parameter_count():
    lay = paper_layout(20)
    assert lay.dims == (20, 64, 32, 16, 16, 32, 64, 20)
    assert lay.encoder_decoder_params == 8180
    assert lay.n_params == 8180 + 17  # head w_s, b_s reported separately


def _count(dims):
    return sum(o * (i + 1) for i, o in zip(dims[:-1], dims[1:]))


@pytest.mark.parametrize("hidden,expected", [
    (1, _count((20, 64, 16, 16, 64, 20))),
    (3, _count((20, 64, 32, 16, 16, 16, 16, 32, 64, 20))),
])
def test_layout_depth_variants(hidden, expected):
    lay = paper_layout(20, hidden_layers=hidden)
    assert lay.encoder_decoder_params == expected


@pytest.mark.parametrize("seed", range(3))
def test_gradient_matches_finite_differences(seed, backend):
    model = random_model(small_sigmoid_layout(), seed)
    batch = _fd_batch(seed)
    g = backward(model, batch, 0.3, backend)["flat"]
    f = fd_gradient(model, batch, 0.3, backend)
    assert grad_rel_error(g, f) < 1e-4


def test_gradient_relu_net_away_from_kinks(backend):
    model = random_model(small_relu_layout(), 4)
    batch = make_batch(SeededRng(5).random((4, 5)), [1, 0, 0, 0], [1.0, 1.0, 0, 0])
    g = backward(model, batch, 0.2, backend)["flat"]
    f = fd_gradient(model, batch, 0.2, backend, h=1e-6)
    assert np.max(np.abs(g - f)) < 1e-5


def test_backends_agree():
    if "cython" not in kernels.BACKENDS:
        pytest.skip("compiled backend not built")
    model = init_model(paper_layout(20), SeededRng(3))
    r = SeededRng(4)
    batch = make_batch(r.random((32, 20)), (r.random(32) > 0.5) * 1.0, np.r_[np.ones(8), np.zeros(24)])
    a = loss_terms(model, batch, 1e-3, "python")
    b = loss_terms(model, batch, 1e-3, "cython")
    for k in a:
        assert a[k] == pytest.approx(b[k], rel=1e-12, abs=1e-15)
    ga = backward(model, batch, 1e-3, "python")["flat"]
    gb = backward(model, batch, 1e-3, "cython")["flat"]
    assert np.max(np.abs(ga - gb)) < 1e-12


@pytest.mark.parametrize("seed", range(4))
def test_jacobian_matches_finite_differences(seed):
    model = random_model(small_relu_layout(), seed)
    x = SeededRng(seed + 7).random(5)
    J = encoder_jacobian(model, x)
    h = 1e-6
    fd = np.zeros_like(J)
    for j in range(5):
        e = np.zeros(5)
        e[j] = h
        fd[:, j] = (forward(model, x + e).z - forward(model, x - e).z) / (2 * h)
    assert np.max(np.abs(J - fd)) < 1e-6


def test_loss_terms_match_definitions(backend):
    model = random_model(small_sigmoid_layout(), 1)
    batch = _fd_batch(1)
    lc = 0.25
    t = loss_terms(model, batch, lc, backend)
    recon = contr = sup = 0.0
    for i, x in enumerate(batch.X):
        tr = forward(model, x)
        recon += np.sum((x - tr.xhat) ** 2)
        contr += lc * np.sum(encoder_jacobian(model, x) ** 2)
        y = batch.y[i]
        sup -= batch.alpha[i] * (y * np.log(tr.yhat) + (1 - y) * np.log(1 - tr.yhat))
    n = len(batch.X)
    assert t["recon"] == pytest.approx(recon / n, rel=1e-12)
    assert t["contractive"] == pytest.approx(contr / n, rel=1e-12)
    assert t["supervised"] == pytest.approx(sup / n, rel=1e-12)


def test_unlabeled_rows_contribute_no_supervised_loss(backend):
    model = random_model(small_sigmoid_layout(), 2)
    batch = make_batch(SeededRng(1).random((4, 6)))
    t = loss_terms(model, batch, 0.0, backend)
    assert t["supervised"] == 0.0 and t["contractive"] == 0.0
    assert np.all(backward(model, batch, 0.0, backend)["head"] == 0.0)


def test_model_roundtrip(tmp_path):
    model = init_model(paper_layout(20), SeededRng(0))
    model.meta["note"] = "x"
    model.save(tmp_path / "m.json")
    back = SSCaeModel.load(tmp_path / "m.json")
    assert np.array_equal(back.params, model.params)
    assert back.layout == model.layout and back.meta["note"] == "x"
    assert back.to_json() == model.to_json()


def _toy_ds(n=300, seed=0):
    r = SeededRng(seed)
    X = r.random((n, 6))
    y = (X[:, 0] > 0.7).astype(float)
    lab = np.arange(0, n, 3)
    return Dataset(X, y, lab, np.setdiff1d(np.arange(n), lab), [f"f{i}" for i in range(6)])


def test_training_reduces_loss_and_is_deterministic(backend):
    ds = _toy_ds()
    cfg = TrainConfig(steps=400, batch_size=16, latent=2, width=8, lr=3e-3, log_interval=100)
    m1, h1 = train(ds, cfg, validation=ds, backend=backend)
    m2, _ = train(ds, cfg, validation=ds, backend=backend)
    assert m1.to_json() == m2.to_json()
    assert h1.total[-50:].mean() < h1.total[:50].mean()
    assert [r["step"] for r in h1.log_rows] == [100, 200, 300, 400]
    assert "val_accuracy" in h1.log_rows[0]


def test_vanilla_mode_flag():
    assert TrainConfig(lambda_c=0, lam=0).mode == "vanilla-ae"
    assert TrainConfig().mode == "ss-deepcae"


def test_invalid_config_lists_every_problem():
    errs = TrainConfig(lambda_c=-1, lr=0, batch_size=0).validate()
    assert len(errs) == 3


def test_divergence_is_reported(monkeypatch):
    class Boom:
        @staticmethod
        def cae_loss_grad(params, *a, **k):
            return float("nan"), 0.0, 0.0, np.zeros_like(params)

    monkeypatch.setattr(kernels, "get", lambda name=None: Boom)
    with pytest.raises(DivergenceError, match="step 1"):
        train(_toy_ds(), TrainConfig(steps=5, latent=2, width=8))
