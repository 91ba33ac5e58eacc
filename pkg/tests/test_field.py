import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evrf import grad as ag
from evrf.field import FieldArch, FieldParams, field_eval, init_field, positional_encode

SMALL = FieldArch(width=16, depth=2, n_freq_pos=2, n_freq_dir=1)


def test_encoding_at_origin():
    e = positional_encode(np.zeros(3), 4)
    assert e.shape == (3 + 24,)
    np.testing.assert_array_equal(e[:3], 0)
    sines = np.concatenate([e[3 + 6 * k: 6 + 6 * k] for k in range(4)])
    cosines = np.concatenate([e[6 + 6 * k: 9 + 6 * k] for k in range(4)])
    np.testing.assert_array_equal(sines, 0)
    np.testing.assert_array_equal(cosines, 1)


def test_encoding_without_frequencies_is_identity():
    v = np.array([0.3, -1.0, 2.5])
    np.testing.assert_array_equal(positional_encode(v, 0), v)


def test_encoding_half_unit():
    e = positional_encode(np.array([0.5, 0.0, 0.0]), 1)
    assert e[3] == pytest.approx(math.sin(math.pi / 2))
    assert e[6] == pytest.approx(math.cos(math.pi / 2), abs=1e-15)
    with pytest.raises(ValueError):
        positional_encode(np.zeros(3), -1)


def test_zero_output_layers_give_activation_midpoints():
    p = init_field(0, SMALL)
    blocks = p.blocks()
    for name in ("sigma.w", "sigma.b", "color.w", "color.b"):
        blocks[name][...] = 0.0
    sigma, color = field_eval(p, np.array([0.1, 0.2, 0.3]), np.array([0.0, 0.0, 1.0]))
    assert sigma == pytest.approx(math.log(2.0), abs=1e-15)
    np.testing.assert_allclose(color, 0.5, atol=0)


def test_golden_output_seed_42():
    p = init_field(42, FieldArch())
    sigma, color = field_eval(p, [0.1, -0.2, 0.3], [0.0, 0.0, 1.0])
    assert float(sigma) == 0.08710934572037574
    assert [float(c) for c in color] == [0.44597319294742865, 0.5368151537538697, 0.9384678907196026]


def test_init_is_deterministic_and_seed_dependent():
    a, b, c = init_field(7, SMALL), init_field(7, SMALL), init_field(8, SMALL)
    np.testing.assert_array_equal(a.flat, b.flat)
    assert not np.array_equal(a.flat, c.flat)
    assert a.flat.size == SMALL.n_params


def test_glorot_layer_spread():
    arch = FieldArch(width=256, depth=2, n_freq_pos=0, n_freq_dir=0)
    w = init_field(123, arch).blocks()["hidden1.w"]
    assert w.shape == (256, 256)
    target = math.sqrt(2.0 / 512)
    assert abs(w.std() - target) / target < 0.1
    np.testing.assert_array_equal(init_field(123, arch).blocks()["hidden1.b"], 0.0)


def test_layout_mismatch_and_nonfinite_rejected():
    with pytest.raises(ValueError):
        FieldParams(SMALL, np.zeros(SMALL.n_params + 1))
    p = init_field(0, SMALL)
    p.flat[3] = np.nan
    with pytest.raises(ValueError):
        field_eval(p, np.zeros(3), np.array([0, 0, 1.0]))
    with pytest.raises(ValueError):
        FieldArch(width=0)


unit = st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda v: np.linalg.norm(v) > 1e-3)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 1000), st.tuples(*[st.floats(-1, 1)] * 3), unit, unit)
def test_density_ignores_direction_and_ranges_hold(seed, x, d1, d2):
    p = init_field(seed, SMALL)
    p = FieldParams(SMALL, p.flat * 3.0)
    d1 = np.array(d1) / np.linalg.norm(d1)
    d2 = np.array(d2) / np.linalg.norm(d2)
    s1, c1 = field_eval(p, np.array(x), d1)
    s2, c2 = field_eval(p, np.array(x), d2)
    assert s1 == s2
    assert s1 >= 0
    assert np.all((c1 >= 0) & (c1 <= 1)) and np.all((c2 >= 0) & (c2 <= 1))


def test_field_eval_is_pure_and_batched_matches_single():
    p = init_field(5, SMALL)
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (6, 3))
    d = rng.normal(size=(6, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    s_a, c_a = field_eval(p, x, d)
    s_b, c_b = field_eval(p, x, d)
    np.testing.assert_array_equal(s_a, s_b)
    np.testing.assert_array_equal(c_a, c_b)
    s0, c0 = field_eval(p, x[2], d[2])
    assert s0 == pytest.approx(s_a[2], rel=1e-14)
    np.testing.assert_allclose(c0, c_a[2], rtol=1e-14)


def test_field_gradient_matches_finite_differences():
    p = init_field(11, FieldArch(width=6, depth=2, n_freq_pos=1, n_freq_dir=1))
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, (4, 3))
    d = rng.normal(size=(4, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    w = rng.normal(size=(4, 3))

    def f(theta):
        sigma, color = field_eval(theta, x, d, p.arch)
        return ag.sum_(sigma) + ag.sum_(color * w)

    assert ag.grad_check(f, p.flat, 1e-5) < 1e-6
