from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evrf import grad as ag
from evrf.events import EventStream, accumulate_dense
from evrf.losses import (LossConfig, WindowBatch, WindowSkipped, classify_pixels, composite_loss, diagnostics,
                         loss_norm, loss_norm_minus, loss_norm_plus, loss_zero_minus, loss_zero_plus, poap,
                         sample_window_pixels, split_counts, taopet)


def _batch(delta, E):
    E = np.asarray(E)
    return WindowBatch(0, 1, np.zeros((len(E), 2), int), E, np.zeros(len(E), int), np.asarray(delta, float))


def test_classify_pixels():
    pos, neg, cons = classify_pixels([2, 0, -1], [0.1, 0.05, 0.2])
    assert list(np.flatnonzero(pos)) == [0, 2]
    assert list(np.flatnonzero(neg)) == [1]
    assert list(np.flatnonzero(cons)) == [0]
    _, _, cons = classify_pixels([1], [0.0])
    assert not cons.any()
    pos, _, cons = classify_pixels([0, 0], [0.3, -0.1])
    assert not pos.any() and not cons.any()


def test_norm_examples():
    assert float(loss_norm(_batch([0.2, -0.2], [1, -1]))) == pytest.approx(0.0, abs=1e-15)
    assert float(loss_norm(_batch([0.3, 0.1], [1, 1]))) == pytest.approx(0.0625, abs=1e-15)
    with pytest.raises(WindowSkipped):
        loss_norm(_batch([0.0, 0.0], [1, 1]))


def test_norm_minus_example_exact_fractions():
    d = [Fraction(2, 10), Fraction(-1, 10), Fraction(5, 100)]
    E = [1, 1, 0]
    dn, en = sum(abs(x) for x in d[:2]), 2
    ref = sum((x / dn - Fraction(e, en)) ** 2 for x, e in zip(d, E)) / 3
    assert ref == Fraction(1, 4)
    got = float(loss_norm_minus(_batch([float(x) for x in d], E)))
    assert got == pytest.approx(float(ref), abs=1e-12)
    # a negative pixel's prediction changes the value even though normalizers ignore it
    assert float(loss_norm_minus(_batch([0.2, -0.1, 0.3], E))) != pytest.approx(got)


def test_norm_plus_example_and_composite():
    b = _batch([0.2, -0.1, 0.05], [1, 1, 0])
    assert float(loss_norm_plus(b)) == pytest.approx((0 + 2.25 + 0.0625) / 3, abs=1e-12)
    total, parts = composite_loss(b, LossConfig(lam=0.5, lam0=0.0))
    assert float(total) == pytest.approx((0 + 2.25 + 0.0625) / 3 + 0.5 * 0.05 / 0.3, abs=1e-12)
    assert float(total) == pytest.approx(0.854167, abs=1e-6)
    assert parts["loss_total"] == float(total)


def test_norm_plus_falls_back_when_nothing_consistent():
    b = _batch([-0.2, -0.1, 0.05], [1, 1, 0])
    assert float(loss_norm_plus(b)) == float(loss_norm_minus(b))


def test_zero_losses():
    b = _batch([0.4, 0.1, -0.4, -0.3], [1, 0, -1, 0])
    assert float(loss_zero_minus(b)) == pytest.approx(0.4, abs=1e-15)
    assert float(loss_zero_plus(b)) == pytest.approx(0.5, abs=1e-15)
    assert float(loss_zero_minus(_batch([0.4, 0.0], [1, 0]))) == 0.0
    assert float(loss_zero_plus(_batch([0.4, 0.0], [1, 0]))) == 0.0
    assert float(loss_zero_minus(_batch([0.4], [1]))) == 0.0
    with pytest.raises(WindowSkipped):
        loss_zero_plus(_batch([0.1], [0]))
    # a vanishing positive-pixel change drops the term instead of dividing by ~0
    with pytest.raises(WindowSkipped):
        loss_zero_plus(_batch([1e-9, 0.3], [1, 0]))
    total, parts = composite_loss(_batch([1e-9, 0.3, 2e-9], [1, 0, -1]), LossConfig(variant="norm", lam=1.0))
    assert parts["loss_zero_plus"] == 0.0 and np.isfinite(float(total))


def test_composite_without_regularizers_equals_variant():
    rng = np.random.default_rng(0)
    E = rng.integers(-3, 4, 40)
    d = rng.normal(size=40)
    for v, fn in (("norm", loss_norm), ("norm-", loss_norm_minus), ("norm+", loss_norm_plus)):
        total, _ = composite_loss(_batch(d, E), LossConfig(variant=v, lam=0, lam0=0))
        assert float(total) == float(fn(_batch(d, E)))


def _random_batch(seed, n=30):
    rng = np.random.default_rng(seed)
    E = rng.integers(-3, 4, n)
    E[0] = 1
    d = rng.normal(size=n)
    d[0] = abs(d[0]) + 0.1
    return d, E


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_positive_scale_invariance(seed, k):
    d, E = _random_batch(seed)
    for fn in (loss_norm, loss_norm_minus, loss_norm_plus, loss_zero_plus):
        assert abs(float(fn(_batch(k * d, E))) - float(fn(_batch(d, E)))) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 2.0))
def test_zero_at_truth(seed, C):
    rng = np.random.default_rng(seed)
    E = rng.integers(-3, 4, 25)
    E[0] = 2
    b = _batch(C * E, E)
    for v in ("norm", "norm-", "norm+"):
        total, _ = composite_loss(b, LossConfig(variant=v, lam=0.7, lam0=0.3))
        assert float(total) < 1e-12
    diag = diagnostics(b)
    assert diag.poap_pos == 1.0
    assert diag.taopet_mean == pytest.approx(C, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_loss_gradients_match_finite_differences(seed):
    d, E = _random_batch(seed)
    if np.abs(d).min() < 1e-3:
        return
    for cfg in (LossConfig(variant="norm"), LossConfig(variant="norm-", lam0=0.5),
                LossConfig(variant="norm+", lam=0.5), LossConfig(variant="norm+", inner_norm="l2", lam=1.0)):

        def f(v):
            total, _ = composite_loss(_batch(d, E).with_delta(v), cfg)
            return total

        # keep steps smaller than the distance to any sign change
        h = min(1e-5, 0.1 * np.abs(d).min())
        assert ag.grad_check(f, d, h) < 1e-4


def test_negative_pixel_never_touches_norm_plus_denominators():
    d, E = np.array([0.3, 0.2, 0.0]), np.array([1, 2, 0])
    tape = ag.Tape()
    x = tape.leaf(d)
    g = ag.backward(tape, loss_norm_plus(_batch(d, E).with_delta(x)))[x.node]
    # with a zero negative prediction the only path to it would run through the denominators
    assert g[2] == 0.0
    assert float(loss_norm_plus(_batch([0.3, 0.2, 0.5], E))) > float(loss_norm_plus(_batch(d, E)))


def test_taopet_and_poap():
    b = _batch([0.5, 0.2, -0.3, 0.1], [2, 1, 1, 0])
    mean, lo, hi = taopet(b)
    assert mean == pytest.approx((0.25 + 0.2 - 0.3) / 3)
    assert (lo, hi) == (-0.3, 0.25)
    assert taopet(_batch([0.5, 0.2], [2, 1]))[0] == pytest.approx(0.225, abs=1e-15)
    assert poap(_batch([1, 1, 1, -1], [1, 1, 1, 1])) == (0.75, 0.75)
    assert poap(_batch([1, 1, 1, 0.2], [1, 1, 1, 0]))[0] == 0.75
    assert poap(_batch([1, 1], [1, 1])) == (1.0, 1.0)
    assert poap(_batch([-1, 0.5], [1, 0]))[0] == 0.0
    assert taopet(_batch([0.1], [0])) is None


def test_split_counts():
    assert split_counts(1024, 0.05) == (52, 972)
    assert split_counts(1024, 0.0) == (0, 1024)
    assert split_counts(10, 1.0) == (10, 0)


def test_sampled_pixels_match_accumulated_window():
    rng = np.random.default_rng(0)
    n = 400
    s = EventStream(16, 8, 0.25, "RGGB", 10_000, np.sort(rng.integers(0, 10_000, n)), rng.integers(0, 16, n),
                    rng.integers(0, 8, n), rng.choice([-1, 1], n))
    b = sample_window_pixels(s, 1000, 6000, 1024, 0.05, np.random.default_rng(1), n_samples=8)
    dense = accumulate_dense(s, 1000, 6000)
    np.testing.assert_array_equal(b.E, dense[b.pixels[:, 1], b.pixels[:, 0]])
    assert (b.E == 0).sum() == 52 and (b.E != 0).sum() == 972
    assert b.jitter.shape == (8,)
    b0 = sample_window_pixels(s, 1000, 6000, 64, 0.0, np.random.default_rng(1))
    assert np.all(b0.E != 0)
    with pytest.raises(WindowSkipped):
        sample_window_pixels(s, 10_000, 10_001, 64, 0.05, np.random.default_rng(1))
