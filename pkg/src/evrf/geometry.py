"""Pinhole camera, ray generation and continuous-time camera trajectories.

Camera frame convention: x right, y down, z forward. Poses are camera-to-world.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float) -> "CameraIntrinsics":
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(R) - 1) > ORTHO_TOL:
            raise ValueError("rotation is not a proper orthonormal matrix")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray


def _check_pixels(K: CameraIntrinsics, u: np.ndarray) -> None:
    if np.any(u[..., 0] < 0) or np.any(u[..., 0] >= K.width) or \
            np.any(u[..., 1] < 0) or np.any(u[..., 1] >= K.height):
        raise ValueError("pixel outside the image")


def pixel_rays(K: CameraIntrinsics, P: Pose, u) -> tuple[np.ndarray, np.ndarray]:
    """Origins and unit directions for an (n, 2) array of (column, row) pixels."""
    u = np.asarray(u, dtype=np.float64)
    _check_pixels(K, u)
    cam = np.stack([(u[..., 0] + 0.5 - K.cx) / K.fx,
                    (u[..., 1] + 0.5 - K.cy) / K.fy,
                    np.ones(u.shape[:-1])], axis=-1)
    d = cam @ P.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(P.translation, d.shape).copy()
    return o, d


def pixel_ray(K: CameraIntrinsics, P: Pose, u) -> Ray:
    o, d = pixel_rays(K, P, np.asarray(u, dtype=np.float64)[None])
    return Ray(o[0], d[0])


def image_pixels(K: CameraIntrinsics) -> np.ndarray:
    """All (column, row) pixel coordinates in row-major order."""
    ys, xs = np.mgrid[0:K.height, 0:K.width]
    return np.stack([xs.ravel(), ys.ravel()], axis=-1)


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> Pose:
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("degenerate look-at: camera position equals target")
    fwd /= n
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    rn = np.linalg.norm(right)
    if rn < 1e-12:
        raise ValueError("degenerate look-at: view direction parallel to up")
    right /= rn
    down = np.cross(fwd, right)
    return Pose(np.stack([right, down, fwd], axis=1), position)


def orbit_pose(t: float, radius: float, height: float, period: float, target=(0.0, 0.0, 0.0)) -> Pose:
    if period <= 0:
        raise ValueError("period must be positive")
    phase = 2 * math.pi * ((t / period) % 1.0)
    pos = (radius * math.cos(phase), radius * math.sin(phase), height)
    return look_at(pos, target)


# quaternions are (w, x, y, z)


def rotation_to_quat(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q / np.linalg.norm(q)


def quat_to_rotation(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def slerp(q0, q1, s: float) -> np.ndarray:
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    c = float(np.dot(q0, q1))
    if c < 0:  # shortest arc
        q1, c = -q1, -c
    if c > 0.9995:
        q = q0 + s * (q1 - q0)
        return q / np.linalg.norm(q)
    theta = math.acos(min(c, 1.0))
    return (math.sin((1 - s) * theta) * q0 + math.sin(s * theta) * q1) / math.sin(theta)


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(R)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def interpolate_pose(keyframes: Sequence[tuple[float, Pose]], t: float) -> Pose:
    if len(keyframes) < 2:
        raise ValueError("need at least two keyframes")
    times = np.array([k[0] for k in keyframes], dtype=np.float64)
    if np.any(np.diff(times) < 0):
        raise ValueError("keyframes must be sorted by time")
    if t < times[0] or t > times[-1]:
        raise ValueError(f"extrapolation refused: t={t} outside [{times[0]}, {times[-1]}]")
    i = int(np.searchsorted(times, t, side="right")) - 1
    i = min(i, len(keyframes) - 2)
    (ta, pa), (tb, pb) = keyframes[i], keyframes[i + 1]
    if t == ta:
        return pa
    if t == tb:
        return pb
    s = (t - ta) / (tb - ta)
    q = slerp(rotation_to_quat(pa.rotation), rotation_to_quat(pb.rotation), s)
    R = _orthonormalize(quat_to_rotation(q))
    return Pose(R, (1 - s) * pa.translation + s * pb.translation)


@dataclass(frozen=True)
class OrbitTrajectory:
    radius: float = 4.0
    height: float = 1.0
    period: float = 4.0
    target: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def pose(self, t: float) -> Pose:
        return orbit_pose(t, self.radius, self.height, self.period, self.target)

    def to_dict(self) -> dict:
        return {"type": "orbit", "radius": self.radius, "height": self.height,
                "period": self.period, "target": list(self.target)}


@dataclass(frozen=True)
class KeyframeTrajectory:
    keyframes: tuple[tuple[float, Pose], ...]

    def pose(self, t: float) -> Pose:
        return interpolate_pose(self.keyframes, t)

    def to_dict(self) -> dict:
        return {"type": "keyframes", "keyframes": keyframes_to_records(self.keyframes)}


def trajectory_from_dict(d: dict):
    if d.get("type", "orbit") == "orbit":
        return OrbitTrajectory(d.get("radius", 4.0), d.get("height", 1.0),
                               d.get("period", 4.0), tuple(d.get("target", (0.0, 0.0, 0.0))))
    if d["type"] == "keyframes":
        return KeyframeTrajectory(tuple(keyframes_from_records(d["keyframes"])))
    raise ValueError(f"unknown trajectory type {d['type']!r}")


def keyframes_to_records(keyframes) -> list[dict]:
    return [{"t_seconds": float(t), "rotation": P.rotation.ravel().tolist(),
             "translation": P.translation.tolist()} for t, P in keyframes]


def keyframes_from_records(records) -> list[tuple[float, Pose]]:
    out = []
    for r in records:
        if len(r["rotation"]) != 9 or len(r["translation"]) != 3:
            raise ValueError("keyframe needs 9 rotation and 3 translation numbers")
        out.append((float(r["t_seconds"]), Pose(np.reshape(r["rotation"], (3, 3)), r["translation"])))
    return out


def write_trajectory(path, keyframes) -> None:
    Path(path).write_text(json.dumps(keyframes_to_records(keyframes), indent=1))


def read_trajectory(path) -> list[tuple[float, Pose]]:
    return keyframes_from_records(json.loads(Path(path).read_text()))
