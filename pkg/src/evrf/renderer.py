"""Differentiable volume rendering and predicted log-intensity differences.

A "source" is any callable ``(x, d) -> (sigma, color)`` over batches of
points; the learned field and the analytic toy scenes both plug in here, so
ground truth and predictions go through the same compositing code.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import grad as ag
from .field import FieldArch, FieldParams, field_eval
from .geometry import CameraIntrinsics, Pose, Ray, image_pixels, pixel_rays

LUMA = 3  # channel tag: mean of RGB


@dataclass(frozen=True)
class RenderConfig:
    near: float = 2.0
    far: float = 6.0
    n_samples: int = 32
    eps: float = 1e-5
    c_bg: tuple[float, float, float] = (0.5, 0.5, 0.5)
    bbox: tuple[tuple[float, float, float], tuple[float, float, float]] = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    stratified: bool = True

    def __post_init__(self):
        if not 0 <= self.near < self.far:
            raise ValueError("need 0 <= near < far")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    def to_dict(self) -> dict:
        return {"near": self.near, "far": self.far, "n_samples": self.n_samples, "eps": self.eps,
                "c_bg": list(self.c_bg), "bbox": [list(self.bbox[0]), list(self.bbox[1])],
                "stratified": self.stratified}

    @classmethod
    def from_dict(cls, d: dict) -> "RenderConfig":
        d = dict(d)
        if "c_bg" in d:
            d["c_bg"] = tuple(d["c_bg"])
        if "bbox" in d:
            d["bbox"] = (tuple(d["bbox"][0]), tuple(d["bbox"][1]))
        return cls(**d)


@dataclass
class RaySamples:
    t: np.ndarray
    positions: np.ndarray
    far: float


@dataclass
class RenderedPixel:
    intensity: object  # (3,) array or Var
    weights: np.ndarray
    background_weight: float = field(default=0.0)


def sample_distances(n_rays: int, near: float, far: float, n_samples: int, jitter=None) -> np.ndarray:
    """(n_rays, S) distances: bin midpoints, or ``near + width*(i + jitter_i)`` if jittered."""
    width = (far - near) / n_samples
    offsets = np.full((n_rays, n_samples), 0.5) if jitter is None else np.broadcast_to(jitter, (n_rays, n_samples))
    return near + width * (np.arange(n_samples) + offsets)


def sample_along_ray(ray: Ray, near: float, far: float, n_samples: int,
                     stratified: bool = False, rng: np.random.Generator | None = None) -> RaySamples:
    if not (0 <= near < far) or n_samples < 1:
        raise ValueError("need 0 <= near < far and n_samples >= 1")
    jitter = None
    if stratified:
        rng = rng if rng is not None else np.random.default_rng()
        # keep draws strictly inside each bin so distances stay strictly increasing
        jitter = np.clip(rng.random(n_samples), 1e-9, 1 - 1e-9)
    t = sample_distances(1, near, far, n_samples, jitter)[0]
    return RaySamples(t, ray.origin + t[:, None] * ray.direction, far)


def composite(sigma, color, t: np.ndarray, far: float, c_bg):
    """Alpha-composite S samples per ray over a solid background.

    sigma (R, S), color (R, S, 3), t (R, S). Returns (intensity (R, 3),
    weights (R, S), background weight (R,)); weights and background weight
    sum to one per ray.
    """
    delta = np.concatenate([np.diff(t, axis=-1), far - t[..., -1:]], axis=-1)
    tau = ag.mul(sigma, delta)
    alpha = 1.0 - ag.exp(ag.neg(tau))
    acc = ag.cumsum(tau, axis=-1)
    trans = ag.exp(ag.neg(ag.sub(acc, tau)))
    weights = ag.mul(trans, alpha)
    bg = ag.exp(ag.neg(ag.index(acc, (Ellipsis, -1))))
    rgb = ag.sum_(ag.mul(ag.reshape(weights, weights.shape + (1,)), color), axis=-2)
    intensity = rgb + ag.mul(ag.reshape(bg, bg.shape + (1,)), np.asarray(c_bg, dtype=np.float64))
    return intensity, weights, bg


def field_source(theta, arch: FieldArch | None = None) -> Callable:
    if isinstance(theta, FieldParams):
        theta, arch = theta.flat, theta.arch
    return lambda x, d: field_eval(theta, x, d, arch)


def render_rays(source: Callable, origins: np.ndarray, dirs: np.ndarray, t: np.ndarray,
                cfg: RenderConfig):
    """Intensity (R, 3) of each ray, sampled at distances t (R, S)."""
    R, S = t.shape
    x = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    lo, hi = np.asarray(cfg.bbox[0]), np.asarray(cfg.bbox[1])
    inside = np.all((x >= lo) & (x <= hi), axis=-1).astype(np.float64)
    xs = np.clip(x, lo, hi).reshape(-1, 3)
    ds = np.repeat(dirs, S, axis=0)
    sigma, color = source(xs, ds)
    sigma = ag.mul(ag.reshape(sigma, (R, S)), inside)
    color = ag.reshape(color, (R, S, 3))
    return composite(sigma, color, t, cfg.far, cfg.c_bg)


def volume_render(theta, ray: Ray, samples: RaySamples, c_bg,
                  arch: FieldArch | None = None) -> RenderedPixel:
    """Render a single ray. ``theta`` is FieldParams, a flat vector + arch, or a source callable."""
    source = theta if callable(theta) else field_source(theta, arch)
    sigma, color = source(samples.positions, np.broadcast_to(ray.direction, samples.positions.shape))
    S = len(samples.t)
    I, w, bg = composite(ag.reshape(sigma, (1, S)), ag.reshape(color, (1, S, 3)),
                         samples.t[None], samples.far, c_bg)
    return RenderedPixel(I[0], ag.value_of(w)[0], float(ag.value_of(bg)[0]))


def log_intensity(I, eps: float = 1e-5):
    return ag.log(ag.add(I, eps))


def select_channel(I, channels: np.ndarray):
    """Per-ray scalar intensity: one RGB channel, or the RGB mean for LUMA."""
    channels = np.asarray(channels)
    R = len(channels)
    luma = ag.mul(ag.sum_(I, axis=-1), 1.0 / 3.0)
    idx = np.minimum(channels, 2)
    picked = ag.index(I, (np.arange(R), idx))
    if np.all(channels == LUMA):
        return luma
    if np.all(channels != LUMA):
        return picked
    m = (channels == LUMA).astype(np.float64)
    return ag.add(ag.mul(picked, 1.0 - m), ag.mul(luma, m))


def render_delta_log(source: Callable, K: CameraIntrinsics, pose_t0: Pose, pose_t: Pose,
                     pixels, channels, cfg: RenderConfig, jitter=None):
    """Predicted log-intensity change at each pixel from pose_t0 to pose_t.

    Both renders share the same sample distances (one jitter draw), so the
    difference is exactly antisymmetric in the pose pair.
    """
    return render_delta_logs(source, K, [(pose_t0, pose_t, pixels, channels, jitter)], cfg)[0]


def render_delta_logs(source: Callable, K: CameraIntrinsics, windows, cfg: RenderConfig) -> list:
    """Batched :func:`render_delta_log` over (pose_t0, pose_t, pixels, channels, jitter) tuples.

    All rays go through ``source`` in one call; the per-window results are
    slices of that single evaluation.
    """
    origins, dirs, ts, chans, sizes = [], [], [], [], []
    for pose_t0, pose_t, pixels, channels, jitter in windows:
        pixels = np.atleast_2d(np.asarray(pixels))
        n = len(pixels)
        channels = np.broadcast_to(np.asarray(channels), (n,))
        t = sample_distances(n, cfg.near, cfg.far, cfg.n_samples, jitter)
        for pose in (pose_t0, pose_t):
            o, d = pixel_rays(K, pose, pixels)
            origins.append(o)
            dirs.append(d)
            ts.append(t)
            chans.append(channels)
        sizes.append(n)
    I, _, _ = render_rays(source, np.concatenate(origins), np.concatenate(dirs), np.concatenate(ts), cfg)
    L = log_intensity(select_channel(I, np.concatenate(chans)), cfg.eps)
    out = []
    start = 0
    for n in sizes:
        out.append(ag.sub(ag.index(L, slice(start + n, start + 2 * n)), ag.index(L, slice(start, start + n))))
        start += 2 * n
    return out


def render_image(source, K: CameraIntrinsics, P: Pose, cfg: RenderConfig,
                 chunk: int = 4096) -> np.ndarray:
    """(height, width, 3) image with deterministic midpoint sampling."""
    if isinstance(source, FieldParams):
        source = field_source(source)
    pix = image_pixels(K)
    o, d = pixel_rays(K, P, pix)
    out = np.empty((len(pix), 3))
    for s in range(0, len(pix), chunk):
        sl = slice(s, s + chunk)
        t = sample_distances(len(o[sl]), cfg.near, cfg.far, cfg.n_samples)
        I, _, _ = render_rays(source, o[sl], d[sl], t, cfg)
        out[sl] = ag.value_of(I)
    return out.reshape(K.height, K.width, 3)


# image files: row-major, top-left origin


def write_png(path, image: np.ndarray) -> None:
    from PIL import Image

    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


def write_ppm16(path, image: np.ndarray) -> None:
    arr = np.round(np.clip(image, 0, 1) * 65535).astype(">u2")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n65535\n".encode("ascii"))
        f.write(arr.tobytes())


def read_image(path) -> np.ndarray:
    """Float image in [0, 1] from a PNG or 16-bit binary PPM."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        data = path.read_bytes()
        tokens = []
        pos = 0
        while len(tokens) < 4:
            while data[pos:pos + 1].isspace():
                pos += 1
            if data[pos:pos + 1] == b"#":
                pos = data.index(b"\n", pos) + 1
                continue
            end = pos
            while not data[end:end + 1].isspace():
                end += 1
            tokens.append(data[pos:end])
            pos = end
        pos += 1
        if tokens[0] != b"P6":
            raise ValueError(f"{path}: not a binary PPM")
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
        dtype = ">u2" if maxval > 255 else "u1"
        arr = np.frombuffer(data, dtype=dtype, count=w * h * 3, offset=pos).reshape(h, w, 3)
        return arr.astype(np.float64) / maxval
    from PIL import Image

    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
