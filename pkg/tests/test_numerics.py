import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xcae.numerics import (AdamState, SeededRng, ShapeError, adam_step, derive_seed, fnv1a64,
                           sigmoid)


def _splitmix_reference(seed, n):
    mask = (1 << 64) - 1
    out, s = [], seed
    for _ in range(n):
        s = (s + 0x9E3779B97F4A7C15) & mask
        z = s
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        out.append(z ^ (z >> 31))
    return out


@pytest.mark.parametrize("seed", [0, 1, 42, 2**63 + 5])
def test_rng_matches_documented_splitmix64(seed):
    got = SeededRng(seed).next_u64(10).tolist()
    assert got == _splitmix_reference(seed, 10)


def test_rng_stream_is_independent_of_chunking():
    a = SeededRng(9)
    whole = a.next_u64(12)
    b = SeededRng(9)
    parts = np.concatenate([b.next_u64(5), b.next_u64(7)])
    assert np.array_equal(whole, parts)


def test_known_splitmix_value():
    # first output for seed 0 is a widely published constant
    assert SeededRng(0).next_u64(1)[0] == 0xE220A8397B1DCDAF


def test_fnv1a_reference_values():
    assert fnv1a64("") == 0xCBF29CE484222325
    assert fnv1a64("a") == 0xAF63DC4C8601EC8C


def test_derive_seed_distinguishes_names_and_masters():
    seeds = {derive_seed(m, n) for m in range(5) for n in ("init", "batches", "split")}
    assert len(seeds) == 15
    assert derive_seed(3, "init") == derive_seed(3, "init")


def test_random_in_unit_interval():
    u = SeededRng(1).random(10_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.02


def test_normal_moments():
    z = SeededRng(2).normal(20_000)
    assert abs(z.mean()) < 0.03
    assert abs(z.std() - 1.0) < 0.03


@given(st.integers(1, 200), st.data())
@settings(max_examples=60, deadline=None)
def test_choice_without_replacement_distinct(n, data):
    k = data.draw(st.integers(0, n))
    idx = SeededRng(n * 31 + k).choice_without_replacement(n, k)
    assert len(idx) == k
    assert len(set(idx.tolist())) == k
    assert all(0 <= i < n for i in idx)


def test_choice_too_many_raises():
    with pytest.raises(ValueError):
        SeededRng(0).choice_without_replacement(3, 4)


@given(st.integers(0, 300))
@settings(max_examples=40, deadline=None)
def test_permutation_is_permutation(n):
    p = SeededRng(n).permutation(n)
    assert sorted(p.tolist()) == list(range(n))


def test_integers_range():
    v = SeededRng(5).integers(7, 5000)
    assert v.min() == 0 and v.max() == 6


def test_sigmoid_saturates_without_overflow():
    with np.errstate(over="raise", invalid="raise"):
        s = sigmoid(np.array([-1e4, 0.0, 1e4]))
    assert 0.0 < s[0] < 1e-10
    assert s[1] == 0.5
    assert 1.0 - 1e-10 < s[2] < 1.0


def test_adam_first_step_is_lr_times_sign():
    p = np.array([1.0, -2.0, 0.5])
    g = np.array([0.3, -4.0, 0.0])
    state = AdamState(p.shape)
    out = adam_step(p, g, state, 0.01)
    # bias correction makes the first step lr * g / (|g| + eps)
    expected = p - 0.01 * g / (np.abs(g) + 1e-8)
    assert np.allclose(out, expected, atol=1e-12)
    assert state.step == 1


def test_adam_converges_on_quadratic():
    p = np.array([3.0, -5.0])
    state = AdamState(p.shape)
    for _ in range(3000):
        p = adam_step(p, 2 * p, state, 0.05)
    assert np.all(np.abs(p) < 1e-3)


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step(np.zeros(3), np.zeros(2), AdamState((3,)), 0.1)
