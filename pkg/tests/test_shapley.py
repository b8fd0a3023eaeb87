import csv
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xcae import shapley
from xcae.numerics import SeededRng
from xcae.shapley import CoalitionMask, ValueFunctionConfig


def permutation_oracle(f, x, base):
    """Shapley values by averaging marginal contributions over all d! orderings."""
    d = len(x)
    phi = np.zeros(d)
    perms = list(itertools.permutations(range(d)))
    for order in perms:
        z = base.copy()
        prev = f(z[None, :])[0]
        for i in order:
            z[i] = x[i]
            cur = f(z[None, :])[0]
            phi[i] += cur - prev
            prev = cur
    return phi / len(perms)


def nonlinear(X):
    X = np.atleast_2d(X)
    return np.tanh(X[:, 0] * X[:, 1] - X[:, 2]) + X[:, 3] ** 2 + 0.5 * X[:, 0] * X[:, 2] * X[:, 3]


def test_linear_oracles(linear):
    x = linear.X_hold[0]
    want = linear.exact(x)
    assert np.max(np.abs(shapley.exact_shapley(linear.f, x, linear.vf).phi - want)) < 1e-9
    mc = shapley.mc_shapley(linear.f, x, 10_000, SeededRng(1), linear.vf)
    assert np.max(np.abs(mc.phi - want)) < 1e-2
    k = shapley.kernel_shapley(linear.f, x, 1 << 8, SeededRng(2), linear.vf)
    assert k.meta["enumerated"]
    assert np.max(np.abs(k.phi - want)) < 1e-8


@pytest.mark.parametrize("seed", range(3))
def test_exact_matches_permutation_oracle(seed):
    r = SeededRng(seed)
    x, base = r.normal(4), r.normal(4)
    vf = ValueFunctionConfig.mean(base)
    got = shapley.exact_shapley(nonlinear, x, vf).phi
    assert np.allclose(got, permutation_oracle(nonlinear, x, base), atol=1e-12)


def test_kernel_enumerated_matches_exact_on_nonlinear():
    r = SeededRng(7)
    x, base = r.normal(4), r.normal(4)
    vf = ValueFunctionConfig.mean(base)
    k = shapley.kernel_shapley(nonlinear, x, 14, SeededRng(0), vf)
    assert k.meta["enumerated"]
    assert np.allclose(k.phi, shapley.exact_shapley(nonlinear, x, vf).phi, atol=1e-10)


@given(st.integers(0, 10**6), st.integers(2, 7))
@settings(max_examples=40, deadline=None)
def test_exact_efficiency(seed, d):
    r = SeededRng(seed)
    W = r.normal((d, d))
    f = lambda X: np.sin(np.atleast_2d(X) @ W).sum(axis=1)  # noqa: E731
    x, base = r.normal(d), r.normal(d)
    a = shapley.exact_shapley(f, x, ValueFunctionConfig.mean(base))
    assert a.phi.sum() == pytest.approx(f(x)[0] - f(base)[0], abs=1e-10)


def test_symmetry_and_dummy():
    f = lambda X: np.atleast_2d(X)[:, 0] * np.atleast_2d(X)[:, 1]  # noqa: E731 (x2 is a dummy)
    vf = ValueFunctionConfig.mean(np.zeros(3))
    phi = shapley.exact_shapley(f, np.array([2.0, 2.0, 5.0]), vf).phi
    assert phi[0] == pytest.approx(phi[1]) and phi[2] == 0.0


def banzhaf_oracle(f, x, base):
    """Mean of f(S u {i}) - f(S) over all 2^(d-1) coalitions S of the other features."""
    d = len(x)
    out = np.zeros(d)
    for i in range(d):
        others = [j for j in range(d) if j != i]
        for r in range(d):
            for S in itertools.combinations(others, r):
                z = base.copy()
                z[list(S)] = x[list(S)]
                lo = f(z[None, :])[0]
                z[i] = x[i]
                out[i] += f(z[None, :])[0] - lo
    return out / 2 ** (d - 1)


def test_mc_unbiased_over_seeds(linear):
    x = linear.X_hold[5]
    exact = shapley.exact_shapley(linear.f, x, linear.vf).phi
    ests = np.array([shapley.mc_shapley(linear.f, x, 100, SeededRng(s), linear.vf).phi
                     for s in range(30)])
    se = ests.std(axis=0, ddof=1) / math.sqrt(30)
    # every draw is exact for an additive model, so se is ~0 and an fp floor is needed
    assert np.all(np.abs(ests.mean(axis=0) - exact) <= 3 * se + 1e-12)


def test_mc_targets_uniform_coalition_average_on_nonlinear():
    # uniform subsets divided by M estimate the unweighted marginal average; it
    # differs from Shapley off the additive case, as documented
    r = SeededRng(11)
    x, base = r.normal(4), r.normal(4)
    vf = ValueFunctionConfig.mean(base)
    ests = np.array([shapley.mc_shapley(nonlinear, x, 200, SeededRng(s), vf).phi for s in range(30)])
    se = ests.std(axis=0, ddof=1) / math.sqrt(30)
    assert np.all(np.abs(ests.mean(axis=0) - banzhaf_oracle(nonlinear, x, base)) <= 4 * se + 1e-12)


def test_mc_exact_for_linear_every_seed(linear):
    x = linear.X_hold[3]
    for s in range(5):
        phi = shapley.mc_shapley(linear.f, x, 50, SeededRng(s), linear.vf).phi
        assert np.allclose(phi, linear.exact(x), atol=1e-12)


def test_kernel_sampled_keeps_efficiency_and_is_close():
    r = SeededRng(3)
    d = 10
    W = r.normal((d, 3))
    f = lambda X: np.tanh(np.atleast_2d(X) @ W).sum(axis=1)  # noqa: E731
    x, base = r.normal(d), np.zeros(d)
    vf = ValueFunctionConfig.mean(base)
    k = shapley.kernel_shapley(f, x, 512, SeededRng(0), vf)
    assert not k.meta["enumerated"]
    assert k.phi.sum() == pytest.approx(f(x)[0] - f(base)[0], abs=1e-10)
    ex = shapley.exact_shapley(f, x, vf).phi
    assert np.max(np.abs(k.phi - ex)) < 0.15 * np.max(np.abs(ex))


def test_kernel_masks_are_complementary_pairs():
    m = shapley._sample_kernel_masks(6, 40, SeededRng(0))
    assert np.all(m[0::2] ^ m[1::2])
    sizes = m.sum(axis=1)
    assert sizes.min() >= 1 and sizes.max() <= 5


def test_constrained_wls_singular_design_is_damped():
    A = np.ones((5, 3))  # rank one
    phi, damped = shapley.solve_constrained_wls(A, np.ones(5), np.ones(5), 2.0)
    assert damped and np.all(np.isfinite(phi))
    assert phi.sum() == pytest.approx(2.0, abs=1e-12)


def test_exact_refuses_large_d():
    vf = ValueFunctionConfig.mean(np.zeros(16))
    with pytest.raises(ValueError, match="16"):
        shapley.exact_shapley(lambda X: np.atleast_2d(X).sum(axis=1), np.ones(16), vf)


def test_kernel_needs_enough_samples(linear):
    with pytest.raises(ValueError):
        shapley.kernel_shapley(linear.f, linear.X_hold[0], 5, SeededRng(0), linear.vf)


def test_coalition_mask_helpers():
    m = CoalitionMask.from_set(5, {0, 3})
    assert m.members() == frozenset({0, 3})
    assert m.array().tolist() == [True, False, False, True, False]
    assert CoalitionMask.full(3).members() == frozenset({0, 1, 2})
    assert CoalitionMask.empty(3).members() == frozenset()
    with pytest.raises(ValueError):
        CoalitionMask.from_set(3, {5})


def test_value_function_endpoints(linear):
    x = linear.X_hold[1]
    full = shapley.value_function(linear.f, x, CoalitionMask.full(8), linear.vf)
    empty = shapley.value_function(linear.f, x, CoalitionMask.empty(8), linear.vf)
    assert full == pytest.approx(linear.f(x[None])[0])
    assert empty == pytest.approx(linear.f(linear.mu[None])[0])


def test_background_mode_averages_fill_rows():
    bg = SeededRng(0).random((50, 3))
    vf = ValueFunctionConfig("background", background=bg, K=8, seed=4)
    f = lambda X: np.atleast_2d(X)[:, 0] ** 2  # noqa: E731
    v = shapley.value_function(f, np.array([0.5, 0.5, 0.5]), CoalitionMask.empty(3), vf)
    assert v == pytest.approx(np.mean(vf.fill_rows(3)[:, 0] ** 2))
    again = ValueFunctionConfig("background", background=bg, K=8, seed=4)
    assert np.array_equal(again.fill_rows(3), vf.fill_rows(3))


def test_explain_rows_and_reports(linear, tmp_path):
    attrs = shapley.explain_rows("kernel", linear.f, linear.X_hold[:3], linear.vf, seed=1,
                                 n_samples=300)
    again = shapley.explain_rows("kernel", linear.f, linear.X_hold[:3], linear.vf, seed=1,
                                 n_samples=300)
    assert all(np.array_equal(a.phi, b.phi) for a, b in zip(attrs, again))
    names = [f"f{i}" for i in range(8)]
    shapley.write_attribution_csv(tmp_path / "a.csv", attrs, names, [7, 8, 9])
    rows = list(csv.DictReader(open(tmp_path / "a.csv")))
    assert len(rows) == 24 and rows[0]["sample_id"] == "7" and rows[0]["method"] == "kernel"
    summary = shapley.attribution_summary(attrs, names)
    # |w| is largest at both ends of linspace(-1, 1)
    assert set(summary["ranking"][:2]) <= {"f0", "f7", "f1", "f6"}


def test_global_ranking_ties_stable():
    g = shapley.global_shapley([shapley.Attribution(np.array([1.0, -1.0, 0.5]), "exact")])
    assert g.ranking().tolist() == [0, 1, 2]
