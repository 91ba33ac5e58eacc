import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evrf import grad as ag
from evrf.field import FieldArch, FieldParams, init_field
from evrf.geometry import CameraIntrinsics, Pose, Ray, orbit_pose
from evrf.pipeline import default_setup
from evrf.renderer import (LUMA, RenderConfig, composite, field_source, log_intensity, read_image,
                           render_delta_log, render_delta_logs, render_image, sample_along_ray,
                           sample_distances, select_channel, volume_render, write_png, write_ppm16)
from evrf.scene import PRESETS

TINY = FieldArch(width=8, depth=2, n_freq_pos=1, n_freq_dir=1)


def _const_source(sigma, color):
    def src(x, d):
        return np.full(len(x), sigma, dtype=float), np.tile(np.asarray(color, float), (len(x), 1))
    return src


def test_midpoint_samples():
    s = sample_along_ray(Ray(np.zeros(3), np.array([0, 0, 1.0])), 0.0, 2.0, 2)
    np.testing.assert_array_equal(s.t, [0.5, 1.5])
    np.testing.assert_array_equal(s.positions[:, 2], [0.5, 1.5])


def test_stratified_samples_reproducible_and_in_range():
    ray = Ray(np.zeros(3), np.array([1.0, 0, 0]))
    a = sample_along_ray(ray, 1.0, 3.0, 8, True, np.random.default_rng(4))
    b = sample_along_ray(ray, 1.0, 3.0, 8, True, np.random.default_rng(4))
    np.testing.assert_array_equal(a.t, b.t)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        t = sample_along_ray(ray, 1.0, 3.0, 5, True, rng).t
        assert t.min() >= 1.0 and t.max() <= 3.0
        assert np.all(np.diff(t) > 0)


def test_transparent_render_is_background():
    ray = Ray(np.zeros(3), np.array([0, 0, 1.0]))
    s = sample_along_ray(ray, 0.5, 2.0, 8)
    px = volume_render(_const_source(0.0, (1, 0, 0)), ray, s, (0.1, 0.2, 0.3))
    np.testing.assert_allclose(px.intensity, [0.1, 0.2, 0.3], atol=0)
    assert px.background_weight == 1.0


def test_opaque_first_sample():
    t = np.array([[1.0, 2.0, 3.0]])
    sigma = np.array([[1e6, 1.0, 1.0]])
    color = np.array([[[0.2, 0.7, 0.9], [1, 1, 1], [0, 0, 0]]])
    I, w, bg = composite(sigma, color, t, 4.0, (0.5, 0.5, 0.5))
    np.testing.assert_allclose(I[0], [0.2, 0.7, 0.9], atol=1e-6)


def test_two_sample_closed_form():
    # sigma*delta = ln 2 at both samples: weights 1/2, 1/4, background 1/4
    t = np.array([[1.0, 2.0]])
    sigma = np.array([[math.log(2.0), math.log(2.0)]])
    color = np.array([[[1.0, 0, 0], [0, 1.0, 0]]])
    I, w, bg = composite(sigma, color, t, 3.0, (0, 0, 1.0))
    np.testing.assert_allclose(w[0], [0.5, 0.25], atol=1e-15)
    assert bg[0] == pytest.approx(0.25, abs=1e-15)
    np.testing.assert_allclose(I[0], [0.5, 0.25, 0.25], atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_weights_telescope_to_one(seed):
    rng = np.random.default_rng(seed)
    t = np.sort(rng.uniform(0.5, 5.0, (50, 16)), axis=1)
    sigma = rng.exponential(rng.uniform(0.01, 50), (50, 16))
    color = rng.uniform(0, 1, (50, 16, 3))
    _, w, bg = composite(sigma, color, t, 5.5, (0.3, 0.3, 0.3))
    assert np.all(w >= 0)
    assert np.abs(w.sum(axis=1) + bg - 1).max() < 1e-6


def test_uniform_color_passes_through():
    rng = np.random.default_rng(2)
    t = np.sort(rng.uniform(1, 3, (10, 12)), axis=1)
    sigma = rng.exponential(3.0, (10, 12))
    c = np.array([0.3, 0.6, 0.1])
    I, _, _ = composite(sigma, np.broadcast_to(c, (10, 12, 3)), t, 3.5, c)
    np.testing.assert_allclose(I, np.broadcast_to(c, I.shape), rtol=1e-15)


def test_log_intensity():
    assert log_intensity(0.0, 1e-5) == pytest.approx(-11.512925464970229, rel=1e-12)
    assert log_intensity(1 - 1e-5, 1e-5) == pytest.approx(0.0, abs=1e-15)
    v = np.linspace(0, 1, 50)
    assert np.all(np.diff(log_intensity(v, 1e-5)) > 0)


def test_select_channel_luma_and_mixed():
    I = np.array([[0.3, 0.6, 0.9], [0.1, 0.2, 0.3]])
    np.testing.assert_allclose(select_channel(I, np.array([LUMA, LUMA])), [0.6, 0.2])
    np.testing.assert_allclose(select_channel(I, np.array([2, LUMA])), [0.9, 0.2])


def _setup():
    scene = PRESETS["two-blobs"]
    K, traj, cfg = default_setup(scene, resolution=16, n_samples=12)
    return scene, K, traj, cfg


def test_delta_log_same_pose_is_zero():
    scene, K, traj, cfg = _setup()
    P = traj.pose(0.3)
    src = field_source(init_field(0, TINY))
    d = render_delta_log(src, K, P, P, np.array([[3, 4], [8, 8]]), np.array([0, 2]), cfg,
                         np.random.default_rng(0).random(cfg.n_samples))
    np.testing.assert_array_equal(d, [0.0, 0.0])


def test_delta_log_uniform_scene_is_zero():
    _, K, traj, cfg = _setup()
    cfg = RenderConfig(**{**cfg.__dict__, "c_bg": (0.4, 0.4, 0.4)})
    d = render_delta_log(_const_source(2.0, (0.4, 0.4, 0.4)), K, traj.pose(0.1), traj.pose(1.3),
                         np.array([[1, 1], [7, 9], [15, 15]]), np.array([0, 1, LUMA]), cfg)
    assert np.abs(d).max() < 1e-9


def test_delta_log_antisymmetric():
    _, K, traj, cfg = _setup()
    src = field_source(init_field(3, TINY))
    pix = np.array([[2, 3], [9, 11], [14, 5]])
    jit = np.random.default_rng(5).random(cfg.n_samples)
    a = render_delta_log(src, K, traj.pose(0.2), traj.pose(0.6), pix, np.array([0, 1, 2]), cfg, jit)
    b = render_delta_log(src, K, traj.pose(0.6), traj.pose(0.2), pix, np.array([0, 1, 2]), cfg, jit)
    np.testing.assert_array_equal(a, -b)


def test_delta_log_golden_two_blobs():
    scene = PRESETS["two-blobs"]
    K, traj, cfg = default_setup(scene)
    jit = np.random.default_rng(7).random(cfg.n_samples)
    d = render_delta_log(scene, K, traj.pose(0.2), traj.pose(0.45), [[28, 30], [40, 33], [20, 20]],
                         [0, 1, 2], cfg, jit)
    # the first two pixels stay inside a blob, the third sweeps from blue blob to gray background
    assert abs(d[0]) < 1e-8 and abs(d[1]) < 1e-8
    assert float(d[2]) == pytest.approx(-0.5877777622282895, abs=1e-12)


def test_batched_delta_logs_match_single_calls():
    _, K, traj, cfg = _setup()
    src = field_source(init_field(1, TINY))
    rng = np.random.default_rng(0)
    wins = [(traj.pose(0.1 * k), traj.pose(0.1 * k + 0.3), rng.integers(0, 16, (5, 2)),
             rng.integers(0, 3, 5), rng.random(cfg.n_samples)) for k in range(3)]
    batched = render_delta_logs(src, K, wins, cfg)
    for w, d in zip(wins, batched):
        np.testing.assert_allclose(d, render_delta_log(src, K, *w[:4], cfg, w[4]), rtol=1e-13, atol=1e-15)


def test_volume_render_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    p = init_field(9, TINY)
    ray = Ray(np.array([0, 0, -3.0]), np.array([0.1, -0.05, 1.0]) / np.linalg.norm([0.1, -0.05, 1.0]))
    s = sample_along_ray(ray, 2.0, 4.0, 10, True, rng)
    w = rng.normal(size=3)

    def f(theta):
        return ag.sum_(volume_render(theta, ray, s, (0.5, 0.5, 0.5), arch=TINY).intensity * w)

    assert ag.grad_check(f, p.flat * 2.0, 1e-4) < 1e-4


def test_render_image_empty_field_shape_and_purity():
    scene, K, traj, cfg = _setup()
    p = init_field(0, TINY)
    blocks = p.blocks()
    blocks["sigma.w"][...] = 0
    blocks["sigma.b"][...] = -1e6
    img = render_image(p, K, traj.pose(0.0), cfg)
    assert img.shape == (K.height, K.width, 3)
    np.testing.assert_allclose(img, np.broadcast_to(cfg.c_bg, img.shape), atol=0)
    q = init_field(4, TINY)
    np.testing.assert_array_equal(render_image(q, K, traj.pose(0.5), cfg), render_image(q, K, traj.pose(0.5), cfg))


def test_image_files_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (5, 7, 3))
    write_png(tmp_path / "a.png", img)
    write_ppm16(tmp_path / "a.ppm", img)
    assert np.abs(read_image(tmp_path / "a.png") - img).max() <= 0.5 / 255 + 1e-12
    assert np.abs(read_image(tmp_path / "a.ppm") - img).max() <= 0.5 / 65535 + 1e-12
    # row-major, top-left origin
    marked = np.zeros((4, 6, 3))
    marked[0, 5] = 1.0
    write_ppm16(tmp_path / "m.ppm", marked)
    back = read_image(tmp_path / "m.ppm")
    assert back[0, 5, 0] == 1.0 and back.sum() == 3.0
