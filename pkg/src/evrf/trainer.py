"""Multi-window optimization with Adam, deterministic seeding and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, TextIO

import numpy as np

from . import grad as ag
from .events import EventStream
from .field import FieldArch, FieldParams, init_field
from .geometry import CameraIntrinsics
from .losses import (LossConfig, WindowBatch, WindowSkipped, composite_loss, diagnostics,
                     sample_window_pixels)
from .renderer import RenderConfig, field_source, render_delta_logs

log = logging.getLogger(__name__)

CKPT_MAGIC = b"SAEN-CKPT"
CKPT_VERSION = 1


class TrainingAborted(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    lr: float = 2e-4
    batch_size: int = 1024
    windows_per_step: int = 4
    l_max: float | None = None  # seconds; None means 10% of the stream duration
    l_min: float = 1e-3
    seed: int = 0
    checkpoint_interval: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    arch: FieldArch = field(default_factory=FieldArch)
    window_tries: int = 20
    fail_limit: int = 100

    def __post_init__(self):
        if self.windows_per_step < 1 or self.batch_size < 1:
            raise ValueError("windows_per_step and batch_size must be >= 1")
        if self.l_min <= 0 or (self.l_max is not None and self.l_max < self.l_min):
            raise ValueError("need 0 < l_min <= l_max")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    def resolved_l_max(self, duration: float) -> float:
        l_max = 0.1 * duration if self.l_max is None else self.l_max
        l_max = max(l_max, self.l_min)
        if l_max > duration:
            raise ValueError("l_max exceeds the stream duration")
        return l_max

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "lr": self.lr, "batch_size": self.batch_size,
                "windows_per_step": self.windows_per_step, "l_max": self.l_max, "l_min": self.l_min,
                "seed": self.seed, "checkpoint_interval": self.checkpoint_interval,
                "loss": self.loss.to_dict(), "render": self.render.to_dict(), "arch": self.arch.to_dict(),
                "window_tries": self.window_tries, "fail_limit": self.fail_limit}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss" in d:
            d["loss"] = LossConfig(**d["loss"])
        if "render" in d:
            d["render"] = RenderConfig.from_dict(d["render"])
        if "arch" in d:
            d["arch"] = FieldArch(**d["arch"])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def draw_window(duration: float, l_max: float, l_min: float, rng: np.random.Generator) -> tuple[float, float]:
    """t ~ U[l_min, T], then t0 ~ U[max(0, t - l_max), t - l_min]."""
    if not 0 < l_min <= l_max <= duration:
        raise ValueError("need 0 < l_min <= l_max <= duration")
    t = rng.uniform(l_min, duration)
    t0 = rng.uniform(max(0.0, t - l_max), t - l_min)
    return t0, t


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(theta: np.ndarray, g: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[np.ndarray, AdamState]:
    theta = np.asarray(theta, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != theta.shape or state.m.shape != theta.shape:
        raise ValueError("gradient / moment shapes do not match parameters")
    bad = np.flatnonzero(~np.isfinite(g))
    if len(bad):
        raise FloatingPointError(f"non-finite gradient at parameter index {bad[0]}")
    step = state.step + 1
    m = beta1 * state.m + (1 - beta1) * g
    v = beta2 * state.v + (1 - beta2) * g * g
    m_hat = m / (1 - beta1 ** step)
    v_hat = v / (1 - beta2 ** step)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, step)


@dataclass
class Checkpoint:
    config: TrainConfig
    params: FieldParams
    state: AdamState
    step: int
    rng_state: dict

    def __eq__(self, other):
        return (isinstance(other, Checkpoint) and self.config == other.config and self.step == other.step
                and self.rng_state == other.rng_state and self.state.step == other.state.step
                and np.array_equal(self.params.flat, other.params.flat)
                and np.array_equal(self.state.m, other.state.m) and np.array_equal(self.state.v, other.state.v))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    header = json.dumps({"config": ckpt.config.to_dict(), "step": ckpt.step, "adam_step": ckpt.state.step,
                         "rng": ckpt.rng_state, "n_params": int(ckpt.params.flat.size)},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<BI", CKPT_VERSION, len(header)))
        f.write(header)
        for arr in (ckpt.params.flat, ckpt.state.m, ckpt.state.v):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic at byte offset 0 in {path}")
    off = len(CKPT_MAGIC)
    if len(data) < off + 5:
        raise CheckpointError(f"truncated checkpoint at byte offset {off} in {path}")
    version, hlen = struct.unpack_from("<BI", data, off)
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version} != {CKPT_VERSION} (byte offset {off})")
    off += 5
    try:
        header = json.loads(data[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header at byte offset {off} in {path}: {exc}") from None
    off += hlen
    n = header["n_params"]
    if len(data) != off + 3 * 8 * n:
        raise CheckpointError(f"corrupt payload: expected {3 * 8 * n} bytes after byte offset {off}, "
                              f"found {len(data) - off}")
    arrays = [np.frombuffer(data, dtype="<f8", count=n, offset=off + 8 * n * i).astype(np.float64)
              for i in range(3)]
    config = TrainConfig.from_dict(header["config"])
    return Checkpoint(config, FieldParams(config.arch, arrays[0]),
                      AdamState(arrays[1], arrays[2], header["adam_step"]), header["step"], header["rng"])


def window_rng(seed: int, step: int, k: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, k])


def draw_batches(stream: EventStream, config: TrainConfig, step: int) -> list[WindowBatch]:
    """Pixel batches for the step's windows (rendering happens later)."""
    T = stream.duration
    l_max = config.resolved_l_max(T)
    batches = []
    for k in range(config.windows_per_step):
        rng = window_rng(config.seed, step, k)
        for _ in range(config.window_tries):
            t0, t = draw_window(T, l_max, config.l_min, rng)
            t0_us, t_us = int(round(t0 * 1e6)), int(round(t * 1e6))
            if t_us <= t0_us:
                continue
            try:
                batches.append(sample_window_pixels(stream, t0_us, t_us, config.batch_size,
                                                    config.loss.neg_ratio, rng, config.render.n_samples,
                                                    config.render.stratified))
                break
            except WindowSkipped:
                continue
    return batches


def render_batches(source: Callable, trajectory, K: CameraIntrinsics, batches: list[WindowBatch],
                   cfg: RenderConfig) -> list[WindowBatch]:
    if not batches:
        return []
    deltas = render_delta_logs(
        source, K,
        [(trajectory.pose(b.t0_us * 1e-6), trajectory.pose(b.t_us * 1e-6), b.pixels, b.channels, b.jitter)
         for b in batches], cfg)
    return [b.with_delta(d) for b, d in zip(batches, deltas)]


def step_objective(theta_var, arch: FieldArch, trajectory, K, batches: list[WindowBatch],
                   config: TrainConfig):
    """Mean composite loss over the non-skipped windows (None if all skipped), plus per-window records."""
    rendered = render_batches(field_source(theta_var, arch), trajectory, K, batches, config.render)
    losses, records = [], []
    for b in rendered:
        try:
            total, parts = composite_loss(b, config.loss)
        except WindowSkipped as exc:
            log.debug("window [%d, %d) skipped: %s", b.t0_us, b.t_us, exc)
            continue
        losses.append(total)
        records.append((parts, diagnostics(b)))
    if not losses:
        return None, records
    obj = losses[0]
    for l in losses[1:]:
        obj = ag.add(obj, l)
    return ag.mul(obj, 1.0 / len(losses)), records


def _summarize(step: int, records) -> dict:
    def avg(key):
        vals = [r[0][key] for r in records]
        return float(np.mean(vals)) if vals else None

    def davg(attr):
        vals = [getattr(r[1], attr) for r in records if getattr(r[1], attr) is not None]
        return float(np.mean(vals)) if vals else None

    return {
        "step": step,
        "loss_total": avg("loss_total"),
        "loss_norm": avg("loss_norm"),
        "loss_zero_plus": avg("loss_zero_plus"),
        "loss_zero_minus": avg("loss_zero_minus"),
        "taopet_mean": davg("taopet_mean"),
        "poap": davg("poap"),
        "poap_pos": davg("poap_pos"),
        "n_pos": int(sum(r[1].n_pos for r in records)),
        "n_neg": int(sum(r[1].n_neg for r in records)),
        "n_consistent": int(sum(r[1].n_consistent for r in records)),
    }


def train(stream: EventStream, trajectory, K: CameraIntrinsics, config: TrainConfig,
          params: FieldParams | None = None, resume: Checkpoint | None = None,
          log_file: TextIO | None = None, checkpoint_path=None,
          callback: Callable[[int, FieldParams, dict], None] | None = None) -> tuple[FieldParams, list[dict]]:
    """Run ``config.iterations`` optimization steps; returns final params and per-step diagnostics.

    Every step's randomness derives from (seed, step, window index), so a
    run resumed from a checkpoint continues exactly like an uninterrupted one.
    """
    if len(stream) == 0:
        raise ValueError("event stream is empty")
    if resume is not None:
        params, state, start = resume.params.copy(), AdamState(resume.state.m.copy(), resume.state.v.copy(),
                                                               resume.state.step), resume.step
    else:
        params = params.copy() if params is not None else init_field(config.seed, config.arch)
        state, start = AdamState.zeros(params.flat.size), 0
    arch = params.arch
    theta = params.flat
    history = []
    fails = 0
    for step in range(start, config.iterations):
        batches = draw_batches(stream, config, step)
        tape = ag.Tape()
        tv = tape.leaf(theta)
        obj, records = step_objective(tv, arch, trajectory, K, batches, config)
        if obj is None:
            fails += 1
            if fails >= config.fail_limit:
                raise TrainingAborted(f"every window skipped for {fails} consecutive steps (at step {step})")
            entry = _summarize(step, [])
        else:
            fails = 0
            g = ag.grad_of(ag.backward(tape, obj), tv)
            theta, state = adam_step(theta, g, state, config.lr)
            entry = _summarize(step, records)
        history.append(entry)
        if log_file is not None:
            log_file.write(json.dumps(entry) + "\n")
        done = step + 1
        if checkpoint_path is not None and config.checkpoint_interval and done % config.checkpoint_interval == 0:
            save_checkpoint(checkpoint_path, Checkpoint(config, FieldParams(arch, theta), state, done,
                                                        {"seed": config.seed, "step": done}))
        if callback is not None:
            callback(step, FieldParams(arch, theta), entry)
    final = FieldParams(arch, theta)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, Checkpoint(config, final, state, max(start, config.iterations),
                                                    {"seed": config.seed, "step": max(start, config.iterations)}))
    return final, history

