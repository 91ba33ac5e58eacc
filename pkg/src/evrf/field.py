"""Positional encoding plus a small MLP mapping (position, direction) to (density, color)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import grad as ag


@dataclass(frozen=True)
class FieldArch:
    width: int = 128
    depth: int = 4
    n_freq_pos: int = 6
    n_freq_dir: int = 2

    def __post_init__(self):
        if self.width < 1 or self.depth < 1:
            raise ValueError("width and depth must be >= 1")
        if self.n_freq_pos < 0 or self.n_freq_dir < 0:
            raise ValueError("frequency counts must be >= 0")

    @property
    def pos_dim(self) -> int:
        return 3 + 6 * self.n_freq_pos

    @property
    def dir_dim(self) -> int:
        return 3 + 6 * self.n_freq_dir

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        """(name, shape) of every parameter block, in flat-vector order."""
        blocks = []
        fan_in = self.pos_dim
        for i in range(self.depth):
            blocks.append((f"hidden{i}.w", (fan_in, self.width)))
            blocks.append((f"hidden{i}.b", (self.width,)))
            fan_in = self.width
        blocks.append(("sigma.w", (self.width, 1)))
        blocks.append(("sigma.b", (1,)))
        blocks.append(("color.w", (self.width + self.dir_dim, 3)))
        blocks.append(("color.b", (3,)))
        return blocks

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layout())

    def to_dict(self) -> dict:
        return {"width": self.width, "depth": self.depth,
                "n_freq_pos": self.n_freq_pos, "n_freq_dir": self.n_freq_dir}


@dataclass
class FieldParams:
    arch: FieldArch
    flat: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.arch.n_params,):
            raise ValueError(
                f"parameter vector has {self.flat.size} entries, layout needs {self.arch.n_params}")

    def blocks(self) -> dict[str, np.ndarray]:
        return unflatten(self.arch, self.flat)

    def copy(self) -> "FieldParams":
        return FieldParams(self.arch, self.flat.copy())


def unflatten(arch: FieldArch, flat) -> dict:
    """Split a flat parameter vector (array or Var) into named blocks."""
    out = {}
    offset = 0
    for name, shape in arch.layout():
        size = int(np.prod(shape))
        piece = flat[offset:offset + size]
        out[name] = ag.reshape(piece, shape) if len(shape) > 1 else piece
        offset += size
    return out


def positional_encode(v, n_freq: int) -> np.ndarray:
    """[v, sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(n-1) pi v), cos(2^(n-1) pi v)]."""
    if n_freq < 0:
        raise ValueError("n_freq must be >= 0")
    v = np.asarray(v, dtype=np.float64)
    parts = [v]
    for k in range(n_freq):
        arg = (2.0 ** k) * np.pi * v
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)


def init_field(seed: int, arch: FieldArch | None = None) -> FieldParams:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    arch = arch or FieldArch()
    rng = np.random.default_rng(seed)
    pieces = []
    for name, shape in arch.layout():
        if name.endswith(".w"):
            fan_in, fan_out = shape
            a = np.sqrt(6.0 / (fan_in + fan_out))
            pieces.append(rng.uniform(-a, a, size=shape).ravel())
        else:
            pieces.append(np.zeros(shape).ravel())
    return FieldParams(arch, np.concatenate(pieces))


def field_eval(theta, x, d, arch: FieldArch | None = None):
    """Evaluate the field at points ``x`` viewed along unit directions ``d``.

    ``theta`` is a FieldParams, or a flat parameter vector (array or Var) plus
    ``arch``. Accepts single points (3,) or batches (n, 3). Returns
    (sigma, color) with sigma >= 0 and color in [0, 1]^3; both are Vars when
    ``theta`` is on a tape.
    """
    if isinstance(theta, FieldParams):
        arch, flat = theta.arch, theta.flat
        if not np.all(np.isfinite(flat)):
            raise ValueError("field parameters contain non-finite values")
    else:
        flat = theta
        if arch is None:
            raise ValueError("arch is required with a raw parameter vector")
        if not np.all(np.isfinite(ag.value_of(flat))):
            raise ValueError("field parameters contain non-finite values")
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    d2 = np.broadcast_to(np.atleast_2d(d), x2.shape)

    p = unflatten(arch, flat)
    h = positional_encode(x2, arch.n_freq_pos)
    for i in range(arch.depth):
        h = ag.softplus(ag.dot(h, p[f"hidden{i}.w"]) + p[f"hidden{i}.b"])
    sigma_raw = ag.dot(h, p["sigma.w"]) + p["sigma.b"]
    sigma = ag.softplus(ag.reshape(sigma_raw, (x2.shape[0],)))
    head_in = ag.concat([h, positional_encode(d2, arch.n_freq_dir)], axis=-1)
    color = ag.sigmoid(ag.dot(head_in, p["color.w"]) + p["color.b"])
    if single:
        return sigma[0], color[0]
    return sigma, color
