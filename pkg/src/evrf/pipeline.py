"""End-to-end helpers: simulate a toy scene, render views, measure background artifacts."""
from __future__ import annotations

import numpy as np

from . import grad as ag
from .events import EventStream, accumulate_dense, bayer_channel, sensor_log_frames, simulate_events
from .field import FieldParams
from .geometry import CameraIntrinsics, OrbitTrajectory, image_pixels, pixel_rays
from .metrics import MetricReport, evaluate_pairs
from .renderer import RenderConfig, field_source, render_delta_logs, render_image, render_rays, sample_distances
from .scene import ToyScene, render_config_for
from .trainer import draw_window


def default_camera(resolution: int = 64, fov_deg: float = 30.0) -> CameraIntrinsics:
    return CameraIntrinsics.from_fov(resolution, resolution, fov_deg)


def default_setup(scene: ToyScene, resolution: int = 64, period: float = 4.0, radius: float = 4.0,
                  height: float = 1.0, n_samples: int = 32):
    """(camera, orbit, render config) used by the toy experiments."""
    K = default_camera(resolution)
    traj = OrbitTrajectory(radius, height, period)
    cfg = render_config_for(scene, float(np.hypot(radius, height)), n_samples)
    return K, traj, cfg


def frame_times(n_frames: int, period: float) -> np.ndarray:
    """n_frames per period plus the closing frame at t = period."""
    return np.linspace(0.0, period, n_frames + 1)


def simulate_scene(scene: ToyScene, K: CameraIntrinsics, trajectory: OrbitTrajectory, cfg: RenderConfig,
                   n_frames: int = 120, threshold: float = 0.25, noise: float = 0.0,
                   pattern: str = "RGGB", seed: int = 1) -> EventStream:
    times = frame_times(n_frames, trajectory.period)
    images = np.stack([render_image(scene, K, trajectory.pose(t), cfg) for t in times])
    log_frames = sensor_log_frames(images, pattern, cfg.eps)
    meta = {"camera": K.to_dict(), "trajectory": trajectory.to_dict(), "render": cfg.to_dict(),
            "scene": scene.to_dict(), "frames": n_frames, "seed": seed}
    return simulate_events(times, log_frames, threshold, noise, np.random.default_rng(seed), pattern, meta)


def held_out_times(trajectory: OrbitTrajectory, n_views: int = 8, offset: float = 0.37) -> np.ndarray:
    """View times between training frames, spread over one period."""
    return (np.arange(n_views) + offset) / n_views * trajectory.period


def evaluate_views(params: FieldParams, scene: ToyScene, K: CameraIntrinsics, trajectory, cfg: RenderConfig,
                   times, gamma: float = 2.2) -> MetricReport:
    pairs = []
    for t in times:
        P = trajectory.pose(t)
        pairs.append((render_image(params, K, P, cfg), render_image(scene, K, P, cfg)))
    return evaluate_pairs(pairs, gamma)


def background_mask(scene: ToyScene, K: CameraIntrinsics, pose, cfg: RenderConfig, pixels) -> np.ndarray:
    """True where the ground-truth ray sees only background."""
    o, d = pixel_rays(K, pose, pixels)
    t = sample_distances(len(o), cfg.near, cfg.far, cfg.n_samples)
    _, _, bg = render_rays(scene, o, d, t, cfg)
    return bg > 1.0 - 1e-9


def background_artifact(params: FieldParams, stream: EventStream, scene: ToyScene, K: CameraIntrinsics,
                        trajectory, cfg: RenderConfig, n_windows: int = 16, l_max: float | None = None,
                        seed: int = 12345) -> float:
    """Mean |predicted log change| over background pixels with zero events, on held-out windows."""
    rng = np.random.default_rng(seed)
    T = stream.duration
    l_max = 0.1 * T if l_max is None else l_max
    pix = image_pixels(K)
    channels = bayer_channel(pix, stream.pattern)
    det = RenderConfig(**{**cfg.__dict__, "stratified": False})
    vals = []
    for _ in range(n_windows):
        t0, t = draw_window(T, l_max, 1e-3, rng)
        t0_us, t_us = int(round(t0 * 1e6)), int(round(t * 1e6))
        E = accumulate_dense(stream, t0_us, t_us).ravel()
        p0, p1 = trajectory.pose(t0_us * 1e-6), trajectory.pose(t_us * 1e-6)
        sel = (E == 0) & background_mask(scene, K, p0, det, pix) & background_mask(scene, K, p1, det, pix)
        if not sel.any():
            continue
        (delta,) = render_delta_logs(field_source(params), K, [(p0, p1, pix[sel], channels[sel], None)], det)
        vals.append(np.abs(ag.value_of(delta)))
    return float(np.mean(np.concatenate(vals))) if vals else 0.0
