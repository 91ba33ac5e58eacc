"""Event generation from log-intensity frames, window accumulation and event files."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .renderer import LUMA

MAGIC = b"SAEN-EVT" + b"\0" * 7 + b"\1"
RECORD = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "V3")])
assert RECORD.itemsize == 16

PATTERNS = ("RGGB", "mono")


class EventFileError(ValueError):
    pass


@dataclass(frozen=True)
class Event:
    t: int
    x: int
    y: int
    p: int


@dataclass
class EventStream:
    """Events sorted by timestamp (integer microseconds), plus sensor metadata.

    ``meta`` carries anything else worth keeping next to the events
    (simulation noise fraction, camera, trajectory) and is stored in the
    file header.
    """

    width: int
    height: int
    threshold: float
    pattern: str
    duration_us: int
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.uint64)
        self.x = np.asarray(self.x, dtype=np.uint16)
        self.y = np.asarray(self.y, dtype=np.uint16)
        self.p = np.asarray(self.p, dtype=np.int8)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event field arrays differ in length")
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}")
        if n:
            if np.any(np.diff(self.t.astype(np.int64)) < 0):
                raise ValueError("unsorted timestamps")
            if int(self.t[-1]) > self.duration_us:
                raise ValueError("event beyond stream duration")
            if np.any(self.x >= self.width) or np.any(self.y >= self.height):
                raise ValueError("event pixel outside sensor")
            if not np.all(np.abs(self.p) == 1):
                raise ValueError("polarity must be +1 or -1")

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self):
        for i in range(len(self)):
            yield Event(int(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (self.header() == other.header() and self.meta == other.meta
                and np.array_equal(self.t, other.t) and np.array_equal(self.x, other.x)
                and np.array_equal(self.y, other.y) and np.array_equal(self.p, other.p))

    def header(self) -> dict:
        return {"width": self.width, "height": self.height, "threshold": self.threshold,
                "pattern": self.pattern, "duration_us": self.duration_us, "count": len(self)}

    @property
    def duration(self) -> float:
        return self.duration_us * 1e-6


def bayer_channel(u, pattern: str = "RGGB"):
    """Color channel measured at pixel u = (column, row); works on arrays of pixels."""
    if pattern not in PATTERNS:
        raise ValueError(f"unknown Bayer pattern {pattern!r}")
    u = np.asarray(u)
    if pattern == "mono":
        out = np.full(u.shape[:-1], LUMA, dtype=np.int64)
    else:
        col, row = u[..., 0] % 2, u[..., 1] % 2
        out = np.where(row == 0, np.where(col == 0, 0, 1), np.where(col == 0, 1, 2)).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def channel_map(width: int, height: int, pattern: str) -> np.ndarray:
    """(height, width) channel index of every pixel."""
    ys, xs = np.mgrid[0:height, 0:width]
    return bayer_channel(np.stack([xs, ys], axis=-1), pattern)


def sensor_log_frames(images: np.ndarray, pattern: str, eps: float = 1e-5) -> np.ndarray:
    """Log intensity seen by each sensor pixel: (T, H, W, 3) RGB frames -> (T, H, W)."""
    images = np.asarray(images, dtype=np.float64)
    _, h, w, _ = images.shape
    ch = channel_map(w, h, pattern)
    if pattern == "mono":
        vals = images.mean(axis=-1)
    else:
        vals = np.take_along_axis(images, ch[None, :, :, None], axis=-1)[..., 0]
    return np.log(vals + eps)


def simulate_events(times, log_frames, threshold: float, noise_fraction: float = 0.0,
                    rng: np.random.Generator | None = None, pattern: str = "mono",
                    meta: dict | None = None) -> EventStream:
    """Reference-tracking event generation between consecutive log frames.

    ``times`` are frame timestamps in seconds starting at or after 0;
    ``log_frames`` is (T, H, W). Each pixel keeps a reference level; whenever
    the new frame is at least one threshold away, events are emitted at the
    linearly interpolated level-crossing times and the reference moves by one
    threshold per event. Spurious events (``floor(noise_fraction * genuine)``
    of them, uniform over pixels, time and polarity) are appended afterwards.
    """
    times = np.asarray(times, dtype=np.float64)
    frames = np.asarray(log_frames, dtype=np.float64)
    if frames.ndim != 3 or len(times) != len(frames):
        raise ValueError("log_frames must be (T, H, W) with one timestamp per frame")
    if len(times) < 2:
        raise ValueError("need at least two frames")
    if np.any(np.diff(times) <= 0):
        raise ValueError("frames must be sorted by strictly increasing time")
    if times[0] < 0:
        raise ValueError("frame times must be non-negative")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    if noise_fraction < 0:
        raise ValueError("noise fraction must be non-negative")
    rng = rng if rng is not None else np.random.default_rng(0)
    _, h, w = frames.shape
    C = threshold
    ref = frames[0].ravel().copy()
    ts, idxs, ps = [], [], []
    for k in range(1, len(frames)):
        ta, tb = times[k - 1], times[k]
        La, Lb = frames[k - 1].ravel(), frames[k].ravel()
        diff = Lb - ref
        # small tolerance so exact multiples of C are not lost to rounding
        n = np.floor(np.abs(diff) / C + 1e-9).astype(np.int64)
        active = np.nonzero(n)[0]
        if len(active) == 0:
            continue
        sign = np.sign(diff[active])
        span = Lb[active] - La[active]
        for j in range(1, int(n[active].max()) + 1):
            sel = n[active] >= j
            pix = active[sel]
            level = ref[pix] + j * sign[sel] * C
            with np.errstate(divide="ignore", invalid="ignore"):
                frac = np.where(span[sel] != 0, (level - La[pix]) / span[sel], 1.0)
            frac = np.clip(frac, 0.0, 1.0)
            ts.append(np.round((ta + frac * (tb - ta)) * 1e6).astype(np.uint64))
            idxs.append(pix)
            ps.append(sign[sel].astype(np.int8))
        ref[active] += n[active] * sign * C
    duration_us = int(round(times[-1] * 1e6))
    t = np.concatenate(ts) if ts else np.zeros(0, np.uint64)
    idx = np.concatenate(idxs) if idxs else np.zeros(0, np.int64)
    p = np.concatenate(ps) if ps else np.zeros(0, np.int8)
    n_noise = int(np.floor(noise_fraction * len(t)))
    if n_noise:
        t = np.concatenate([t, rng.integers(0, duration_us + 1, n_noise).astype(np.uint64)])
        idx = np.concatenate([idx, rng.integers(0, h * w, n_noise)])
        p = np.concatenate([p, rng.choice(np.array([-1, 1], dtype=np.int8), n_noise)])
    order = np.argsort(t, kind="stable")
    meta = dict(meta or {})
    meta["noise_fraction"] = noise_fraction
    meta["n_genuine"] = len(t) - n_noise
    return EventStream(w, h, C, pattern, duration_us, t[order], idx[order] % w, idx[order] // w, p[order], meta)


def window_slice(stream: EventStream, t0_us: int, t_us: int) -> slice:
    if t0_us >= t_us:
        raise ValueError("window needs t0 < t")
    lo = int(np.searchsorted(stream.t, np.uint64(max(t0_us, 0)), side="left"))
    hi = int(np.searchsorted(stream.t, np.uint64(max(t_us, 0)), side="left"))
    return slice(lo, hi)


def accumulate_dense(stream: EventStream, t0_us: int, t_us: int) -> np.ndarray:
    """(height, width) integer polarity sums over the half-open window [t0, t)."""
    s = window_slice(stream, t0_us, t_us)
    flat = stream.y[s].astype(np.int64) * stream.width + stream.x[s]
    acc = np.bincount(flat, weights=stream.p[s], minlength=stream.width * stream.height)
    return np.rint(acc).astype(np.int64).reshape(stream.height, stream.width)


def accumulate(stream: EventStream, t0_us: int, t_us: int, pixels=None) -> dict[tuple[int, int], int]:
    """Sparse map (column, row) -> polarity sum over [t0, t); zero-sum pixels are absent.

    The window end may be ``duration_us + 1`` to include events stamped at
    the final instant.
    """
    if t0_us < 0 or t_us > stream.duration_us + 1:
        raise ValueError("window outside stream duration")
    dense = accumulate_dense(stream, t0_us, t_us)
    if pixels is None:
        ys, xs = np.nonzero(dense)
        return {(int(x), int(y)): int(dense[y, x]) for x, y in zip(xs, ys)}
    out = {}
    for x, y in pixels:
        v = int(dense[y, x])
        if v:
            out[(int(x), int(y))] = v
    return out


def write_events(stream: EventStream, path) -> None:
    header = dict(stream.header())
    header["meta"] = stream.meta
    hbytes = json.dumps(header).encode("utf-8")
    rec = np.zeros(len(stream), dtype=RECORD)
    rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.p
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        f.write(rec.tobytes())


def read_events(path) -> EventStream:
    data = Path(path).read_bytes()
    if data[:16] != MAGIC:
        raise EventFileError(f"bad magic at byte offset 0 in {path}")
    if len(data) < 20:
        raise EventFileError(f"truncated header length at byte offset 16 in {path}")
    (hlen,) = struct.unpack_from("<I", data, 16)
    if len(data) < 20 + hlen:
        raise EventFileError(f"truncated header at byte offset 20 in {path}")
    try:
        header = json.loads(data[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise EventFileError(f"unreadable header at byte offset 20 in {path}: {exc}") from None
    start = 20 + hlen
    body = len(data) - start
    count = header["count"]
    if body % RECORD.itemsize:
        raise EventFileError(
            f"truncated record at byte offset {start + (body // RECORD.itemsize) * RECORD.itemsize} in {path}")
    if body // RECORD.itemsize != count:
        raise EventFileError(
            f"header says {count} records but {body // RECORD.itemsize} follow byte offset {start} in {path}")
    rec = np.frombuffer(data, dtype=RECORD, count=count, offset=start)
    t = rec["t"]
    bad = np.nonzero(np.diff(t.astype(np.int64)) < 0)[0]
    if len(bad):
        raise EventFileError(f"unsorted timestamps at byte offset {start + (bad[0] + 1) * RECORD.itemsize} in {path}")
    return EventStream(header["width"], header["height"], header["threshold"], header["pattern"],
                       header["duration_us"], t.copy(), rec["x"].copy(), rec["y"].copy(), rec["p"].copy(),
                       header.get("meta", {}))
