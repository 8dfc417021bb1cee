"""Event streams, voxel encoding, event simulation and blur synthesis."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])

STEV_MAGIC = b"STEV1\0"
# magic, width, height, t_start, t_end
_STEV_HEADER = struct.Struct("<6sHHQQ")

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


class EventFormatError(ValueError):
    pass


class Event(NamedTuple):
    t: int
    x: int
    y: int
    p: int


@dataclass
class EventStream:
    """Time-ordered polarity events on a ``height x width`` sensor.

    ``events`` is a structured array with fields ``t`` (microseconds),
    ``x``, ``y`` and ``p`` (+1/-1).
    """

    events: np.ndarray
    width: int
    height: int
    t_start: int
    t_end: int

    def __post_init__(self):
        ev = np.asarray(self.events)
        if ev.dtype != EVENT_DTYPE:
            ev = ev.astype(EVENT_DTYPE)
        self.events = ev
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"sensor dims must be positive, got {self.width}x{self.height}")
        if not self.t_start < self.t_end:
            raise ValueError(f"empty window [{self.t_start}, {self.t_end}]")
        if len(ev) == 0:
            return
        t = ev["t"]
        if np.any(np.diff(t.astype(np.int64)) < 0):
            raise ValueError("event timestamps must be non-decreasing")
        if t[0] < self.t_start or t[-1] > self.t_end:
            raise ValueError("event timestamps outside the stream window")
        if ev["x"].max() >= self.width or ev["y"].max() >= self.height:
            raise ValueError("event coordinates outside the sensor")
        if not np.all(np.abs(ev["p"]) == 1):
            raise ValueError("polarities must be +1 or -1")

    @classmethod
    def empty(cls, width: int, height: int, t_start: int, t_end: int) -> "EventStream":
        return cls(np.zeros(0, EVENT_DTYPE), width, height, t_start, t_end)

    @classmethod
    def from_events(cls, events: Sequence[Event], width, height, t_start, t_end) -> "EventStream":
        arr = np.array([tuple(e) for e in events], dtype=EVENT_DTYPE)
        return cls(arr, width, height, t_start, t_end)

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        for t, x, y, p in self.events.tolist():
            yield Event(t, x, y, p)

    @property
    def duration(self) -> int:
        return self.t_end - self.t_start

    def flipped(self) -> "EventStream":
        ev = self.events.copy()
        ev["p"] = -ev["p"]
        return EventStream(ev, self.width, self.height, self.t_start, self.t_end)

    def count_image(self) -> np.ndarray:
        """Signed per-pixel event count."""
        img = np.zeros((self.height, self.width), np.int64)
        np.add.at(img, (self.events["y"], self.events["x"]), self.events["p"])
        return img


@dataclass
class VoxelGrid:
    data: np.ndarray  # (bins, H, W), float64
    window: tuple[int, int]

    @property
    def bins(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class EventSimConfig:
    threshold_c: float = 0.2
    log_eps: float = 1e-3
    refractory_us: int = 0

    def __post_init__(self):
        if not self.threshold_c > 0:
            raise ValueError("threshold_c must be positive")
        if not self.log_eps > 0:
            raise ValueError("log_eps must be positive")
        if self.refractory_us < 0:
            raise ValueError("refractory_us must be non-negative")


def voxelize(stream: EventStream, bins: int) -> VoxelGrid:
    """Signed voxel grid with linear splitting between neighbouring bin centres.

    Bin centres sit at ``t_start + k * T / (bins - 1)``; with one bin every
    event lands in it.
    """
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    grid = np.zeros((bins, stream.height, stream.width), np.float64)
    ev = stream.events
    if len(ev) == 0:
        return VoxelGrid(grid, (stream.t_start, stream.t_end))
    x = ev["x"].astype(np.int64)
    y = ev["y"].astype(np.int64)
    if x.max() >= stream.width or y.max() >= stream.height:
        raise ValueError("event coordinates outside the sensor")
    p = ev["p"].astype(np.float64)
    if bins == 1:
        np.add.at(grid[0], (y, x), p)
        return VoxelGrid(grid, (stream.t_start, stream.t_end))

    tn = (bins - 1) * (ev["t"].astype(np.float64) - stream.t_start) / stream.duration
    left = np.clip(np.floor(tn).astype(np.int64), 0, bins - 2)
    w_right = tn - left
    np.add.at(grid, (left, y, x), p * (1.0 - w_right))
    np.add.at(grid, (left + 1, y, x), p * w_right)
    return VoxelGrid(grid, (stream.t_start, stream.t_end))


def to_luma(frame: np.ndarray) -> np.ndarray:
    """(H, W) passthrough, (3, H, W) -> luma."""
    frame = np.asarray(frame, np.float64)
    if frame.ndim == 2:
        return frame
    if frame.ndim == 3 and frame.shape[0] == 1:
        return frame[0]
    if frame.ndim == 3 and frame.shape[0] == 3:
        return np.tensordot(LUMA_WEIGHTS, frame, axes=1)
    raise ValueError(f"unsupported frame shape {frame.shape}")


def simulate_events(frames: Sequence[np.ndarray], timestamps: Sequence[int],
                    cfg: EventSimConfig = EventSimConfig()) -> EventStream:
    """Threshold-crossing event generation from a rendered frame sequence.

    Each pixel integrates log(I + log_eps) linearly between frames against a
    reference level; every crossing of reference +/- c emits one event at the
    interpolated time and moves the reference by +/- c.
    """
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    if len(frames) != len(timestamps):
        raise ValueError("one timestamp per frame required")
    ts = np.asarray(timestamps, np.int64)
    if np.any(np.diff(ts) <= 0):
        raise ValueError("timestamps must be strictly increasing")
    if ts[0] < 0:
        raise ValueError("timestamps must be non-negative")
    lum = [to_luma(f) for f in frames]
    shape = lum[0].shape
    if any(f.shape != shape for f in lum):
        raise ValueError("frames must share dims")
    h, w = shape
    c = cfg.threshold_c
    logs = np.log(np.stack(lum) + cfg.log_eps).reshape(len(lum), -1)

    if cfg.refractory_us > 0:
        chunks = _simulate_refractory(logs, ts, c, cfg.refractory_us)
    else:
        chunks = _simulate_vectorized(logs, ts, c)

    if chunks:
        t_all, pix_all, p_all = (np.concatenate(a) for a in zip(*chunks))
    else:
        t_all = pix_all = p_all = np.zeros(0, np.int64)
    ys, xs = np.divmod(pix_all, w)
    order = np.lexsort((xs, ys, t_all))
    ev = np.zeros(len(order), EVENT_DTYPE)
    ev["t"] = t_all[order]
    ev["x"] = xs[order]
    ev["y"] = ys[order]
    ev["p"] = p_all[order]
    return EventStream(ev, w, h, int(ts[0]), int(ts[-1]))


# float slack so that an exact k*c step yields k events
_CROSS_TOL = 1e-9


def _crossing_time(t0, t1, l0, l1, level):
    dl = l1 - l0
    frac = np.where(dl != 0, (level - l0) / np.where(dl != 0, dl, 1.0), 0.0)
    return np.rint(t0 + frac * (t1 - t0)).astype(np.int64)


def _simulate_vectorized(logs, ts, c):
    ref = logs[0].copy()
    chunks = []
    for k in range(len(ts) - 1):
        l0, l1 = logs[k], logs[k + 1]
        up = np.floor((l1 - ref) / c + _CROSS_TOL).astype(np.int64)
        down = np.floor((ref - l1) / c + _CROSS_TOL).astype(np.int64)
        n = np.maximum(up, 0) + np.maximum(down, 0)
        if not n.any():
            continue
        pix = np.repeat(np.arange(len(ref)), n)
        sign = np.where(up > 0, 1, -1)[pix]
        # j-th crossing of each pixel, 1-based
        starts = np.cumsum(n) - n
        j = np.arange(len(pix)) - starts[pix] + 1
        level = ref[pix] + sign * j * c
        t = _crossing_time(ts[k], ts[k + 1], l0[pix], l1[pix], level)
        chunks.append((t, pix, sign))
        ref = ref + np.where(up > 0, up, 0) * c - np.where(down > 0, down, 0) * c
    return chunks


def _simulate_refractory(logs, ts, c, refractory_us):
    # per-pixel loop; crossings inside the refractory gap are dropped but still
    # advance the reference so the integrator stays consistent
    chunks = []
    for pix in range(logs.shape[1]):
        ref = logs[0, pix]
        last_t = None
        t_out, p_out = [], []
        for k in range(len(ts) - 1):
            l0, l1 = logs[k, pix], logs[k + 1, pix]
            while True:
                if l1 - ref >= c - _CROSS_TOL * c:
                    sign = 1
                elif ref - l1 >= c - _CROSS_TOL * c:
                    sign = -1
                else:
                    break
                level = ref + sign * c
                t = int(_crossing_time(ts[k], ts[k + 1], l0, l1, level))
                ref = level
                if last_t is None or t - last_t >= refractory_us:
                    t_out.append(t)
                    p_out.append(sign)
                    last_t = t
        if t_out:
            chunks.append((np.array(t_out, np.int64), np.full(len(t_out), pix, np.int64),
                           np.array(p_out, np.int64)))
    return chunks


def synthesize_blur(frames: Sequence[np.ndarray]) -> np.ndarray:
    """Pixel-wise mean of an exposure's sharp frames."""
    if len(frames) == 0:
        raise ValueError("cannot blur an empty frame sequence")
    stack = np.stack([np.asarray(f) for f in frames])
    out_dtype = stack.dtype if np.issubdtype(stack.dtype, np.floating) else np.float64
    return stack.mean(axis=0, dtype=np.float64).astype(out_dtype)


def frame_times(t_start: int, t_end: int, m: int) -> np.ndarray:
    """Uniform latent-frame timestamps over an exposure, endpoints included."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if m == 1:
        return np.array([(t_start + t_end) / 2.0])
    return np.linspace(t_start, t_end, m)


def edi_deblur(blurry: np.ndarray, stream: EventStream, c: float, m: int) -> list[np.ndarray]:
    """Event double-integral reconstruction of ``m`` latent frames.

    With S(t) the signed event count up to t at a pixel, the latent frame at
    time f is ``B * exp(c * S(f)) / mean_t exp(c * S(t))``. The mean over the
    exposure is integrated exactly since S is piecewise constant.
    """
    if not c > 0:
        raise ValueError("threshold c must be positive")
    blurry = np.asarray(blurry, np.float64)
    hw = (stream.height, stream.width)
    if blurry.shape[-2:] != hw:
        raise ValueError(f"blurry dims {blurry.shape[-2:]} do not match stream {hw}")
    n_pix = stream.height * stream.width
    ev = stream.events
    pix = ev["y"].astype(np.int64) * stream.width + ev["x"].astype(np.int64)
    t = ev["t"].astype(np.float64)
    p = ev["p"].astype(np.float64)
    t0, t1 = float(stream.t_start), float(stream.t_end)

    order = np.lexsort((t, pix))
    pix, t, p = pix[order], t[order], p[order]
    csum = np.cumsum(p)
    first = np.ones(len(pix), bool)
    first[1:] = pix[1:] != pix[:-1]
    seg_start = np.maximum.accumulate(np.where(first, np.arange(len(pix)), 0))
    base = np.where(seg_start > 0, csum[seg_start - 1], 0.0) if len(pix) else csum
    s_after = csum - base
    s_before = s_after - p
    prev_t = np.where(first, t0, np.roll(t, 1))

    integral = np.zeros(n_pix)
    np.add.at(integral, pix, (t - prev_t) * np.exp(c * s_before))
    touched = np.zeros(n_pix, bool)
    touched[pix] = True
    last = np.ones(len(pix), bool)
    last[:-1] = pix[1:] != pix[:-1]
    tail = np.full(n_pix, t1 - t0)
    tail[touched] = 0.0
    np.add.at(tail, pix[last], (t1 - t[last]) * np.exp(c * s_after[last]))
    mean_exp = (integral + tail) / (t1 - t0)

    out = []
    for f in frame_times(stream.t_start, stream.t_end, m):
        s_f = np.zeros(n_pix)
        sel = t <= f
        np.add.at(s_f, pix[sel], p[sel])
        gain = (np.exp(c * s_f) / mean_exp).reshape(hw)
        out.append(blurry * gain)
    return out


def write_events(stream: EventStream, path, config: dict | None = None) -> None:
    """Binary ``.stev`` file plus a ``.json`` sidecar with counts and config."""
    path = Path(path)
    header = _STEV_HEADER.pack(STEV_MAGIC, stream.width, stream.height,
                               stream.t_start, stream.t_end)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(stream.events.astype(EVENT_DTYPE).tobytes())
    ev = stream.events
    sidecar = {
        "count": int(len(ev)),
        "positive": int(np.sum(ev["p"] > 0)),
        "negative": int(np.sum(ev["p"] < 0)),
        "width": stream.width,
        "height": stream.height,
        "t_start": stream.t_start,
        "t_end": stream.t_end,
        "config": config or {},
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def read_events(path) -> EventStream:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _STEV_HEADER.size:
        raise EventFormatError(f"{path}: truncated header")
    magic, width, height, t_start, t_end = _STEV_HEADER.unpack_from(raw)
    if magic != STEV_MAGIC:
        raise EventFormatError(f"{path}: bad magic {magic!r}")
    body = raw[_STEV_HEADER.size:]
    if len(body) % EVENT_DTYPE.itemsize:
        raise EventFormatError(f"{path}: payload is not a whole number of records")
    ev = np.frombuffer(body, EVENT_DTYPE).copy()
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        if meta.get("count") != len(ev):
            raise EventFormatError(f"{path}: sidecar count {meta.get('count')} != {len(ev)} records")
    try:
        return EventStream(ev, width, height, t_start, t_end)
    except ValueError as exc:
        raise EventFormatError(f"{path}: {exc}") from exc
