"""Procedural toy scenes with analytic density and color."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, Pose
from .renderer import RenderConfig, render_image


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    color: tuple[float, float, float]
    density: float = 40.0

    def contains(self, x: np.ndarray) -> np.ndarray:
        return np.sum((x - np.asarray(self.center)) ** 2, axis=-1) <= self.radius ** 2

    def bounds(self):
        c = np.asarray(self.center)
        return c - self.radius, c + self.radius

    def to_dict(self) -> dict:
        return {"type": "sphere", "center": list(self.center), "radius": self.radius,
                "color": list(self.color), "density": self.density}


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    color: tuple[float, float, float]
    density: float = 40.0

    def contains(self, x: np.ndarray) -> np.ndarray:
        return np.all((x >= np.asarray(self.lo)) & (x <= np.asarray(self.hi)), axis=-1)

    def bounds(self):
        return np.asarray(self.lo), np.asarray(self.hi)

    def to_dict(self) -> dict:
        return {"type": "box", "lo": list(self.lo), "hi": list(self.hi),
                "color": list(self.color), "density": self.density}


@dataclass(frozen=True)
class ToyScene:
    primitives: tuple = ()
    background: tuple[float, float, float] = (0.5, 0.5, 0.5)
    bbox: tuple[tuple[float, float, float], tuple[float, float, float]] = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        lo, hi = np.asarray(self.bbox[0]), np.asarray(self.bbox[1])
        for p in self.primitives:
            if p.density < 0:
                raise ValueError("primitive density must be non-negative")
            if not all(0 <= c <= 1 for c in p.color):
                raise ValueError("primitive colors must lie in [0, 1]")
            plo, phi = p.bounds()
            if np.any(plo < lo) or np.any(phi > hi):
                raise ValueError("primitive extends outside the scene bounding box")
        if not all(0 <= c <= 1 for c in self.background):
            raise ValueError("background color must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {"name": self.name, "background": list(self.background),
                "bbox": [list(self.bbox[0]), list(self.bbox[1])],
                "primitives": [p.to_dict() for p in self.primitives]}

    @classmethod
    def from_dict(cls, d: dict) -> "ToyScene":
        prims = []
        for p in d.get("primitives", []):
            if p["type"] == "sphere":
                prims.append(Sphere(tuple(p["center"]), p["radius"], tuple(p["color"]), p.get("density", 40.0)))
            elif p["type"] == "box":
                prims.append(Box(tuple(p["lo"]), tuple(p["hi"]), tuple(p["color"]), p.get("density", 40.0)))
            else:
                raise ValueError(f"unknown primitive type {p['type']!r}")
        bbox = d.get("bbox", [[-1, -1, -1], [1, 1, 1]])
        return cls(tuple(prims), tuple(d.get("background", (0.5, 0.5, 0.5))),
                   (tuple(bbox[0]), tuple(bbox[1])), d.get("name", "custom"))

    def __call__(self, x, d=None):
        return scene_eval(self, x)


PRESETS = {
    "two-blobs": ToyScene(
        (Sphere((0.35, 0.2, 0.0), 0.45, (0.9, 0.25, 0.15)),
         Sphere((-0.4, -0.3, 0.1), 0.4, (0.15, 0.35, 0.9))),
        background=(0.5, 0.5, 0.5), name="two-blobs"),
    "box-and-sphere": ToyScene(
        (Box((-0.7, -0.3, -0.5), (-0.1, 0.3, 0.2), (0.85, 0.8, 0.2)),
         Sphere((0.4, 0.1, 0.0), 0.4, (0.2, 0.75, 0.3))),
        background=(0.5, 0.5, 0.5), name="box-and-sphere"),
}


def load_scene(spec: str) -> ToyScene:
    """A preset name or a path to a scene JSON file."""
    if spec in PRESETS:
        return PRESETS[spec]
    return ToyScene.from_dict(json.loads(Path(spec).read_text()))


def scene_eval(scene: ToyScene, x):
    """(sigma, color) at points x; color is the density-weighted mean, background where empty."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    sigma = np.zeros(len(x2))
    rgb = np.zeros((len(x2), 3))
    for p in scene.primitives:
        s = p.contains(x2) * p.density
        sigma += s
        rgb += s[:, None] * np.asarray(p.color)
    empty = sigma <= 0
    color = np.where(empty[:, None], np.asarray(scene.background, dtype=np.float64),
                     rgb / np.where(empty, 1.0, sigma)[:, None])
    if single:
        return sigma[0], color[0]
    return sigma, color


def render_config_for(scene: ToyScene, camera_distance: float, n_samples: int = 32,
                      stratified: bool = True) -> RenderConfig:
    """Near/far planes that enclose the scene box seen from ``camera_distance``."""
    lo, hi = np.asarray(scene.bbox[0]), np.asarray(scene.bbox[1])
    r = 0.5 * float(np.linalg.norm(hi - lo))
    center = float(np.linalg.norm(0.5 * (lo + hi)))
    near = max(1e-3, camera_distance - r - center)
    far = camera_distance + r + center
    return RenderConfig(near=near, far=far, n_samples=n_samples, c_bg=scene.background,
                        bbox=scene.bbox, stratified=stratified)


def render_ground_truth(scene: ToyScene, K: CameraIntrinsics, P: Pose, cfg: RenderConfig) -> np.ndarray:
    return render_image(scene, K, P, cfg)
