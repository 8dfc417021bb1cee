"""Synthetic rectified stereo scenes: an intensity view and an event view.

Scenes are stacks of fronto-parallel textured layers, each with a constant
disparity and a constant image-plane velocity. Textures are analytic
functions of continuous coordinates, so the event view is exactly the
intensity view sampled at ``x + d``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock

from .events import (EventFormatError, EventSimConfig, EventStream, read_events,
                     simulate_events, synthesize_blur, write_events)

EXPOSURE_FRAMES = 49
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    pass


@dataclass
class Layer:
    seed: int
    disparity: float
    velocity: tuple = (0.0, 0.0)  # (vx, vy) px per high-FPS frame
    # (x0, y0, w, h) in layer coordinates; None covers the whole plane
    mask: tuple | None = None
    texture: str = "noise"  # noise | ramp | flat

    def __post_init__(self):
        self.velocity = tuple(float(v) for v in self.velocity)
        if self.mask is not None:
            self.mask = tuple(float(v) for v in self.mask)
        if self.texture not in ("noise", "ramp", "flat"):
            raise ValueError(f"unknown texture {self.texture!r}")


@dataclass
class SceneSpec:
    height: int
    width: int
    layers: list = field(default_factory=list)  # back to front
    frames: int = EXPOSURE_FRAMES
    exposure: int = EXPOSURE_FRAMES
    exposure_start: int = 0
    channels: int = 1
    frame_dt_us: int = 1000
    max_disparity: float = 48.0

    def __post_init__(self):
        self.layers = [l if isinstance(l, Layer) else Layer(**l) for l in self.layers]
        if self.height <= 0 or self.width <= 0:
            raise ValueError("scene dims must be positive")
        if self.exposure < 2:
            raise ValueError("exposure must span at least two frames")
        if self.exposure_start < 0 or self.exposure_start + self.exposure > self.frames:
            raise ValueError("exposure window exceeds the rendered frame count")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        for layer in self.layers:
            if not 0.0 <= layer.disparity <= self.max_disparity:
                raise ValueError(f"layer disparity {layer.disparity} outside [0, {self.max_disparity}]")

    def to_dict(self):
        return asdict(self)


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


class _Texture:
    """Band-limited sinusoid mixture plus soft discs and bars."""

    def __init__(self, layer: Layer, channels: int, width: int, height: int):
        rng = np.random.default_rng(layer.seed)
        self.kind = layer.texture
        self.channels = channels
        self.width = width
        if self.kind == "noise":
            n = 12
            freq = rng.uniform(0.08, 0.6, n)
            angle = rng.uniform(0, np.pi, n)
            self.kx = freq * np.cos(angle)
            self.ky = freq * np.sin(angle)
            self.phase = rng.uniform(0, 2 * np.pi, n)
            self.amp = rng.uniform(0.5, 1.0, n) / freq ** 0.5
            self.amp *= 0.22 / np.sqrt(np.sum(self.amp ** 2) / 2)
            n_disc = 4
            self.disc_c = rng.uniform([0, 0], [width, height], (n_disc, 2))
            self.disc_r = rng.uniform(3, max(4, min(width, height) / 5), n_disc)
            self.disc_v = rng.uniform(-0.3, 0.3, n_disc)
            self.bar_x = rng.uniform(0, width, 2)
            self.bar_w = rng.uniform(2, 5, 2)
            self.bar_v = rng.uniform(-0.25, 0.25, 2)
        self.base = rng.uniform(0.35, 0.65)
        self.tint = rng.uniform(0.75, 1.0, channels) if channels == 3 else np.ones(1)

    def __call__(self, u, v):
        if self.kind == "flat":
            g = np.full_like(u, self.base)
        elif self.kind == "ramp":
            g = 0.1 + 0.8 * u / self.width
        else:
            g = np.full_like(u, self.base)
            for kx, ky, ph, a in zip(self.kx, self.ky, self.phase, self.amp):
                g = g + a * np.sin(kx * u + ky * v + ph)
            for (cx, cy), r, dv in zip(self.disc_c, self.disc_r, self.disc_v):
                dist = np.hypot(u - cx, v - cy)
                g = g + dv * np.clip(r - dist + 0.5, 0.0, 1.0)
            for bx, bw, dv in zip(self.bar_x, self.bar_w, self.bar_v):
                cov = np.clip(u - bx + 0.5, 0, 1) * np.clip(bx + bw - u + 0.5, 0, 1)
                g = g + dv * cov
            g = np.clip(g, 0.02, 0.98)
        return self.tint[:, None, None] * g[None]


def _coverage(u, v, mask):
    if mask is None:
        return np.ones_like(u)
    x0, y0, w, h = mask
    cx = np.clip(u - x0 + 0.5, 0, 1) * np.clip(x0 + w - u + 0.5, 0, 1)
    cy = np.clip(v - y0 + 0.5, 0, 1) * np.clip(y0 + h - v + 0.5, 0, 1)
    return cx * cy


def render_scene(spec: SceneSpec, view: str = "intensity", frame_indices=None) -> np.ndarray:
    """Composite the layers; returns (K, C, H, W) float64 in [0, 1].

    The event view samples every layer at ``x + d`` (rectified stereo).
    """
    if view not in ("intensity", "event"):
        raise ValueError(f"unknown view {view!r}")
    if frame_indices is None:
        frame_indices = range(spec.frames)
    frame_indices = list(frame_indices)
    ys, xs = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    textures = [_Texture(l, spec.channels, spec.width, spec.height) for l in spec.layers]
    out = np.zeros((len(frame_indices), spec.channels, spec.height, spec.width))
    for i, k in enumerate(frame_indices):
        canvas = out[i]
        for layer, tex in zip(spec.layers, textures):
            shift = layer.disparity if view == "event" else 0.0
            u = xs + shift - layer.velocity[0] * k
            v = ys - layer.velocity[1] * k
            alpha = _coverage(u, v, layer.mask)
            canvas[:] = alpha * tex(u, v) + (1.0 - alpha) * canvas
    return out


def gt_disparity(spec: SceneSpec, frame_index: int) -> np.ndarray:
    """Disparity of the front-most layer covering each intensity-view pixel."""
    ys, xs = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    disp = np.zeros((spec.height, spec.width))
    for layer in spec.layers:
        u = xs - layer.velocity[0] * frame_index
        v = ys - layer.velocity[1] * frame_index
        disp[_coverage(u, v, layer.mask) >= 0.5] = layer.disparity
    return disp


def gt_frame_indices(exposure: int, m: int) -> np.ndarray:
    if m < 1:
        raise ValueError("M must be >= 1")
    if m == 1:
        return np.array([(exposure - 1) // 2])
    return np.rint(np.linspace(0, exposure - 1, m)).astype(np.int64)


class Sample:
    """One record; reads of ``gt_disparity`` are counted for leak audits."""

    def __init__(self, blurry, events: EventStream, gt_frames, gt_disparity, meta, sample_id="0000"):
        self.blurry = np.asarray(blurry, np.float32)
        self.events = events
        self.gt_frames = np.asarray(gt_frames, np.float32)
        self._gt_disparity = np.asarray(gt_disparity, np.float32)
        self.meta = meta
        self.id = sample_id
        self.disparity_reads = 0

    @property
    def gt_disparity(self):
        self.disparity_reads += 1
        return self._gt_disparity

    @property
    def M(self):
        return self.gt_frames.shape[0]

    @property
    def shape(self):
        return self.blurry.shape[-2:]


def make_sample(spec: SceneSpec, sim_cfg: EventSimConfig = EventSimConfig(), M: int = 7,
                sample_id: str = "0000") -> Sample:
    exp = list(range(spec.exposure_start, spec.exposure_start + spec.exposure))
    intensity = render_scene(spec, "intensity", exp)
    event_view = render_scene(spec, "event", exp)
    timestamps = [k * spec.frame_dt_us for k in exp]
    blurry = synthesize_blur(list(intensity))
    stream = simulate_events(list(event_view), timestamps, sim_cfg)
    idx = gt_frame_indices(spec.exposure, M)
    mid = spec.exposure_start + (spec.exposure - 1) // 2
    meta = {
        "height": spec.height,
        "width": spec.width,
        "channels": spec.channels,
        "M": M,
        "gt_timestamps": [timestamps[i] for i in idx],
        "t_start": timestamps[0],
        "t_end": timestamps[-1],
        "scene": spec.to_dict(),
        "sim": asdict(sim_cfg),
    }
    meta["config_hash"] = config_hash({"scene": meta["scene"], "sim": meta["sim"], "M": M})
    return Sample(blurry, stream, intensity[idx], gt_disparity(spec, mid), meta, sample_id)


def random_scene(rng: np.random.Generator, height: int, width: int, n_layers: int = 2,
                 channels: int = 1, max_disparity: float = 12.0, max_speed: float = 0.3,
                 disparity: float | None = None) -> SceneSpec:
    """Random layered scene; deeper layers get smaller disparities.

    ``disparity`` fixes every layer's disparity (single-plane scenes).
    """
    if n_layers < 1:
        raise ValueError("need at least one layer")
    disps = np.sort(rng.uniform(1.0, max_disparity, n_layers))
    layers = []
    for i in range(n_layers):
        speed = rng.uniform(0.1, max_speed)
        angle = rng.uniform(0, 2 * np.pi)
        vel = (speed * np.cos(angle), 0.5 * speed * np.sin(angle))
        if i == 0:
            mask = None
        else:
            w = rng.uniform(0.3, 0.6) * width
            h = rng.uniform(0.3, 0.6) * height
            mask = (rng.uniform(0, width - w), rng.uniform(0, height - h), w, h)
        d = float(disparity) if disparity is not None else float(round(disps[i], 2))
        layers.append(Layer(seed=int(rng.integers(2 ** 31)), disparity=d,
                            velocity=vel, mask=mask))
    return SceneSpec(height, width, layers, channels=channels,
                     max_disparity=max(48.0, max_disparity))


def generate_dataset(n: int, height: int, width: int, seed: int = 0, n_layers: int = 2,
                     channels: int = 1, M: int = 7, sim_cfg: EventSimConfig = EventSimConfig(),
                     disparity: float | None = None, max_disparity: float = 12.0,
                     max_speed: float = 0.3) -> list[Sample]:
    rng = np.random.default_rng(seed)
    specs = [random_scene(rng, height, width, n_layers, channels, max_disparity, max_speed,
                          disparity=disparity) for _ in range(n)]
    return [make_sample(s, sim_cfg, M, f"{i:04d}") for i, s in enumerate(specs)]


def _write_raw(path: Path, arr: np.ndarray):
    np.ascontiguousarray(arr, dtype="<f4").tofile(path)


def _read_raw(path: Path, shape) -> np.ndarray:
    if not path.exists():
        raise DatasetFormatError(f"missing {path}")
    arr = np.fromfile(path, "<f4")
    if arr.size != int(np.prod(shape)):
        raise DatasetFormatError(f"{path}: expected {int(np.prod(shape))} values, found {arr.size}")
    return arr.reshape(shape)


def write_sample(sample: Sample, root: Path) -> None:
    d = Path(root) / sample.id
    d.mkdir(parents=True, exist_ok=True)
    _write_raw(d / "blurry.raw", sample.blurry)
    for m, frame in enumerate(sample.gt_frames):
        _write_raw(d / f"gt_{m}.raw", frame)
    _write_raw(d / "disp.raw", sample._gt_disparity)
    write_events(sample.events, d / "events.stev", config=sample.meta.get("sim"))
    meta = dict(sample.meta)
    meta["blurry_shape"] = list(sample.blurry.shape)
    meta["format_version"] = FORMAT_VERSION
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def write_dataset(samples, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_sample(s, root)
    with FileLock(str(root / ".manifest.lock")):
        manifest_path = root / "manifest.json"
        ids = []
        if manifest_path.exists():
            ids = json.loads(manifest_path.read_text()).get("samples", [])
        ids = sorted(set(ids) | {s.id for s in samples})
        manifest = {"format_version": FORMAT_VERSION, "count": len(ids), "samples": ids}
        manifest_path.write_text(json.dumps(manifest, indent=2))
    return root


def read_sample(d: Path) -> Sample:
    d = Path(d)
    try:
        meta = json.loads((d / "meta.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"{d}: unreadable meta.json ({exc})") from exc
    try:
        c, h, w = meta["blurry_shape"]
        M = meta["M"]
    except (KeyError, ValueError) as exc:
        raise DatasetFormatError(f"{d}: incomplete meta.json") from exc
    blurry = _read_raw(d / "blurry.raw", (c, h, w))
    gt = np.stack([_read_raw(d / f"gt_{m}.raw", (c, h, w)) for m in range(M)])
    disp = _read_raw(d / "disp.raw", (h, w))
    try:
        events = read_events(d / "events.stev")
    except (EventFormatError, OSError) as exc:
        raise DatasetFormatError(str(exc)) from exc
    if (events.height, events.width) != (h, w):
        raise DatasetFormatError(f"{d}: event sensor dims do not match images")
    return Sample(blurry, events, gt, disp, meta, d.name)


def read_dataset(root) -> list[Sample]:
    root = Path(root)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"{root}: unreadable manifest ({exc})") from exc
    ids = manifest.get("samples")
    if ids is None or manifest.get("count") != len(ids):
        raise DatasetFormatError(f"{root}: manifest count does not match its sample list")
    return [read_sample(root / i) for i in ids]

