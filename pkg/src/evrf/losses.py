"""Normalized event losses, zero-event regularizers and convergence diagnostics.

Per window, sampled pixels split into positives (non-zero accumulated
polarity), negatives (zero polarity) and consistent positives (predicted
log change has the same sign as the polarity). The normalization losses
compare L1-normalized predictions against L1-normalized polarities; they only
differ in which pixels enter the normalizers.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import grad as ag
from .events import EventStream, accumulate_dense, bayer_channel
from .renderer import RenderConfig

log = logging.getLogger(__name__)

VARIANTS = ("norm", "norm-", "norm+")
INNER_NORMS = ("l1", "l2")


class WindowSkipped(RuntimeError):
    """The window's loss is undefined (degenerate normalizer); it must not contribute."""


@dataclass(frozen=True)
class LossConfig:
    variant: str = "norm+"
    inner_norm: str = "l1"
    lam: float = 0.5  # zero+ weight
    lam0: float = 0.0  # zero- weight
    neg_ratio: float = 0.05
    eps_div: float = 1e-8

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.inner_norm not in INNER_NORMS:
            raise ValueError(f"inner_norm must be one of {INNER_NORMS}")
        if self.lam < 0 or self.lam0 < 0 or self.neg_ratio < 0:
            raise ValueError("loss weights and sampling ratio must be non-negative")
        if self.eps_div <= 0:
            raise ValueError("eps_div must be positive")

    @classmethod
    def fast(cls, **kw) -> "LossConfig":
        """Weights of the fast (hash-grid) preset."""
        return cls(**{"lam": 1.0, "lam0": 0.5, **kw})

    def to_dict(self) -> dict:
        return {"variant": self.variant, "inner_norm": self.inner_norm, "lam": self.lam,
                "lam0": self.lam0, "neg_ratio": self.neg_ratio, "eps_div": self.eps_div}


@dataclass
class WindowBatch:
    t0_us: int
    t_us: int
    pixels: np.ndarray  # (N, 2) column, row
    E: np.ndarray  # (N,) integer polarity sums
    channels: np.ndarray  # (N,)
    delta: object = None  # (N,) predicted log change, Var or array
    jitter: np.ndarray | None = field(default=None, repr=False)

    @property
    def delta_values(self) -> np.ndarray:
        return ag.value_of(self.delta)

    def masks(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return classify_pixels(self.E, self.delta_values)

    def with_delta(self, delta) -> "WindowBatch":
        return WindowBatch(self.t0_us, self.t_us, self.pixels, self.E, self.channels, delta, self.jitter)


def classify_pixels(E, delta) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Boolean masks (positive, negative, consistent positive)."""
    E = np.asarray(E)
    delta = np.asarray(ag.value_of(delta))
    if E.shape != delta.shape:
        raise ValueError("E and predictions must be aligned")
    pos = E != 0
    return pos, ~pos, pos & (delta * E > 0)


def _norm(x, mask, kind: str):
    """Masked L1 (or L2) norm; ``mask`` is a constant selector."""
    if kind == "l1":
        return ag.sum_(ag.mul(ag.abs_(x), mask))
    return ag.sqrt(ag.sum_(ag.mul(ag.square(x), mask)))


def _normalized_residual(delta, E, mask, cfg: LossConfig, what: str):
    E = np.asarray(E, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    dn = _norm(delta, mask, cfg.inner_norm)
    en = float(_norm(E, mask, cfg.inner_norm))
    if float(ag.value_of(dn)) <= cfg.eps_div or en <= cfg.eps_div:
        raise WindowSkipped(f"{what}: normalizer below eps_div")
    r = ag.sub(ag.div(delta, dn), E / en)
    return ag.mean(ag.square(r))


def loss_norm(batch: WindowBatch, cfg: LossConfig = LossConfig()):
    """Normalizers taken over all sampled pixels."""
    return _normalized_residual(batch.delta, batch.E, np.ones(len(batch.E)), cfg, "norm")


def loss_norm_minus(batch: WindowBatch, cfg: LossConfig = LossConfig()):
    """Normalizers over positive pixels only; residuals still over every pixel."""
    pos, _, _ = batch.masks()
    if not pos.any():
        raise WindowSkipped("norm-: no positive pixels")
    return _normalized_residual(batch.delta, batch.E, pos, cfg, "norm-")


def loss_norm_plus(batch: WindowBatch, cfg: LossConfig = LossConfig()):
    """Normalizers over consistent positives; falls back to norm- when there are none."""
    _, _, cons = batch.masks()
    if cons.any():
        try:
            return _normalized_residual(batch.delta, batch.E, cons, cfg, "norm+")
        except WindowSkipped:
            pass
    log.debug("norm+: no usable consistent pixels, falling back to norm-")
    return loss_norm_minus(batch, cfg)


def loss_zero_minus(batch: WindowBatch):
    """L1 sum of predicted change over zero-event pixels."""
    _, neg, _ = batch.masks()
    return ag.sum_(ag.mul(ag.abs_(batch.delta), neg.astype(np.float64)))


def loss_zero_plus(batch: WindowBatch, cfg: LossConfig = LossConfig()):
    """Zero-event change relative to the change predicted at positive pixels.

    eps_div guards the denominator instead of being added to it, which keeps
    the ratio exactly invariant to a positive rescaling of the predictions.
    """
    pos, neg, _ = batch.masks()
    if not pos.any():
        raise WindowSkipped("zero+: no positive pixels")
    a = ag.abs_(batch.delta)
    num = ag.sum_(ag.mul(a, neg.astype(np.float64)))
    den = ag.sum_(ag.mul(a, pos.astype(np.float64)))
    if float(ag.value_of(den)) <= cfg.eps_div:
        raise WindowSkipped("zero+: positive-pixel change below eps_div")
    return ag.div(num, den)


_VARIANT_FN = {"norm": loss_norm, "norm-": loss_norm_minus, "norm+": loss_norm_plus}


def composite_loss(batch: WindowBatch, cfg: LossConfig = LossConfig()):
    """Variant loss + lam * zero+ + lam0 * zero-; returns (total, parts).

    Raises WindowSkipped when the variant loss is undefined for this window.
    """
    main = _VARIANT_FN[cfg.variant](batch, cfg)
    total = main
    parts = {"loss_norm": float(ag.value_of(main)), "loss_zero_plus": 0.0, "loss_zero_minus": 0.0}
    if cfg.lam > 0:
        try:
            zp = loss_zero_plus(batch, cfg)
        except WindowSkipped as exc:
            log.debug("zero+ term dropped for this window: %s", exc)
        else:
            parts["loss_zero_plus"] = float(ag.value_of(zp))
            total = ag.add(total, ag.mul(zp, cfg.lam))
    if cfg.lam0 > 0:
        zm = loss_zero_minus(batch)
        parts["loss_zero_minus"] = float(ag.value_of(zm))
        total = ag.add(total, ag.mul(zm, cfg.lam0))
    parts["loss_total"] = float(ag.value_of(total))
    return total, parts


@dataclass
class Diagnostics:
    taopet_mean: float | None
    taopet_min: float | None
    taopet_max: float | None
    poap: float
    poap_pos: float | None
    n_pos: int
    n_neg: int
    n_consistent: int


def taopet(batch: WindowBatch) -> tuple[float, float, float] | None:
    """(mean, min, max) of predicted per-pixel thresholds delta/E over positives."""
    pos, _, _ = batch.masks()
    if not pos.any():
        return None
    c = batch.delta_values[pos] / batch.E[pos]
    return float(c.mean()), float(c.min()), float(c.max())


def poap(batch: WindowBatch) -> tuple[float, float | None]:
    """(consistent / all sampled, consistent / positives)."""
    pos, _, cons = batch.masks()
    n = len(batch.E)
    if n < 1:
        raise ValueError("empty batch")
    l = int(cons.sum())
    return l / n, (l / int(pos.sum()) if pos.any() else None)


def diagnostics(batch: WindowBatch) -> Diagnostics:
    pos, neg, cons = batch.masks()
    tp = taopet(batch)
    p, pp = poap(batch)
    return Diagnostics(tp[0] if tp else None, tp[1] if tp else None, tp[2] if tp else None,
                       p, pp, int(pos.sum()), int(neg.sum()), int(cons.sum()))


def split_counts(n: int, neg_ratio: float) -> tuple[int, int]:
    """(negatives, positives) for a batch of n pixels."""
    n_neg = min(n, int(math.ceil(neg_ratio * n - 1e-9)))
    return n_neg, n - n_neg


def sample_window_pixels(stream: EventStream, t0_us: int, t_us: int, n: int, neg_ratio: float,
                         rng: np.random.Generator, n_samples: int | None = None,
                         stratified: bool = True) -> WindowBatch:
    """Pick pixels for one window without rendering anything yet.

    Negatives are drawn uniformly (with replacement) among zero-sum pixels,
    positives among non-zero ones. Raises WindowSkipped if the window holds
    no positive pixel.
    """
    if n < 1:
        raise ValueError("batch size must be >= 1")
    dense = accumulate_dense(stream, t0_us, t_us)
    flat = dense.ravel()
    pos_idx = np.flatnonzero(flat)
    neg_idx = np.flatnonzero(flat == 0)
    if len(pos_idx) == 0:
        raise WindowSkipped("window has no events")
    n_neg, n_pos = split_counts(n, neg_ratio)
    if len(neg_idx) == 0:
        n_neg, n_pos = 0, n
    chosen = np.concatenate([rng.choice(neg_idx, n_neg), rng.choice(pos_idx, n_pos)]).astype(np.int64)
    pixels = np.stack([chosen % stream.width, chosen // stream.width], axis=-1)
    jitter = None
    if n_samples is not None and stratified:
        jitter = np.clip(rng.random(n_samples), 1e-9, 1 - 1e-9)
    return WindowBatch(t0_us, t_us, pixels, flat[chosen], bayer_channel(pixels, stream.pattern), None, jitter)


def sample_window_batch(stream: EventStream, trajectory, K, theta, window: tuple[int, int], n: int,
                        neg_ratio: float, rng: np.random.Generator, cfg: RenderConfig, arch=None) -> WindowBatch:
    """Sample pixels for window (t0_us, t_us) and render their predicted log change."""
    from .renderer import field_source, render_delta_log

    t0_us, t_us = window
    batch = sample_window_pixels(stream, t0_us, t_us, n, neg_ratio, rng, cfg.n_samples, cfg.stratified)
    source = theta if callable(theta) else field_source(theta, arch)
    delta = render_delta_log(source, K, trajectory.pose(t0_us * 1e-6), trajectory.pose(t_us * 1e-6),
                             batch.pixels, batch.channels, cfg, batch.jitter)
    return batch.with_delta(delta)
