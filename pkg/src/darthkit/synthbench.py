"""Synthetic moving-shapes videos with a controllable photometric domain shift.

Scene content (object shapes, sizes, colour indices, motion) comes from a
:class:`SceneSpec`; everything about appearance comes from a
:class:`DomainStyle`. Source and target sets built from the same specs
therefore differ only in style.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image
from scipy.ndimage import gaussian_filter

from .mot_io import LabeledVideo, TrackingResult, TrackRow, Video, atomic_write, format_mot

SHAPES = ("circle", "square", "triangle")
DEFAULT_PALETTE = (
    (220, 40, 40),
    (40, 170, 60),
    (40, 70, 220),
    (235, 200, 30),
    (170, 50, 210),
    (30, 190, 200),
)
MIN_VISIBLE = 0.3


@dataclass(frozen=True)
class DomainStyle:
    background_intensity: float = 200.0
    noise_sigma: float = 0.0
    global_hue_shift: float = 0.0
    object_palette: tuple[tuple[int, int, int], ...] = DEFAULT_PALETTE
    blur_radius: float = 0.0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not self.object_palette:
            raise ValueError("palette must be nonempty")


SOURCE_STYLE = DomainStyle()
TARGET_STYLE = DomainStyle(background_intensity=50.0, noise_sigma=20.0, global_hue_shift=60.0)


@dataclass(frozen=True)
class ObjectSpec:
    shape: int  # index into SHAPES, doubles as class id
    size: float  # side / diameter in px
    color_index: int
    x0: float
    y0: float
    vx: float
    vy: float
    amp: float
    freq: float
    phase: float


@dataclass(frozen=True)
class SceneSpec:
    num_objects: int = 3
    num_frames: int = 30
    width: int = 128
    height: int = 96
    seed: int = 0
    size_range: tuple[float, float] = (14.0, 24.0)
    speed_range: tuple[float, float] = (0.5, 2.0)
    num_classes: int = 3
    objects: Optional[tuple[ObjectSpec, ...]] = None

    def resolved_objects(self) -> tuple[ObjectSpec, ...]:
        if self.objects is not None:
            return self.objects
        rng = np.random.default_rng([self.seed, 7919])
        out = []
        for _ in range(self.num_objects):
            size = rng.uniform(*self.size_range)
            speed = rng.uniform(*self.speed_range)
            angle = rng.uniform(0, 2 * math.pi)
            out.append(
                ObjectSpec(
                    shape=int(rng.integers(0, min(self.num_classes, len(SHAPES)))),
                    size=float(size),
                    color_index=int(rng.integers(0, 1 << 16)),
                    x0=float(rng.uniform(size, self.width - size)),
                    y0=float(rng.uniform(size, self.height - size)),
                    vx=float(speed * math.cos(angle)),
                    vy=float(speed * math.sin(angle)),
                    amp=float(rng.uniform(0.0, 4.0)),
                    freq=float(rng.uniform(0.1, 0.4)),
                    phase=float(rng.uniform(0, 2 * math.pi)),
                )
            )
        return tuple(out)


def _fold(x: float, lo: float, hi: float) -> float:
    """Reflect ``x`` into ``[lo, hi]`` (objects bounce off the borders)."""
    span = hi - lo
    if span <= 0:
        return lo
    t = (x - lo) % (2 * span)
    return lo + (t if t <= span else 2 * span - t)


def object_center(o: ObjectSpec, t: int, width: int, height: int) -> tuple[float, float]:
    half = o.size / 2
    x = o.x0 + o.vx * t + o.amp * math.sin(o.freq * t + o.phase)
    y = o.y0 + o.vy * t + o.amp * math.cos(o.freq * t + o.phase)
    return _fold(x, half, width - half), _fold(y, half, height - half)


def shape_mask(shape: int, cx: float, cy: float, size: float, width: int, height: int) -> np.ndarray:
    """Boolean mask of pixels whose centres fall inside the shape."""
    ys, xs = np.mgrid[0:height, 0:width]
    px, py = xs + 0.5, ys + 0.5
    r = size / 2
    name = SHAPES[shape]
    if name == "circle":
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    if name == "square":
        return (np.abs(px - cx) <= r) & (np.abs(py - cy) <= r)
    # upward triangle inscribed in the size x size square
    top, bottom = cy - r, cy + r
    rel = (py - top) / (bottom - top)
    inside_y = (py >= top) & (py <= bottom)
    return inside_y & (np.abs(px - cx) <= rel * r)


def _apply_style(canvas: np.ndarray, style: DomainStyle, rng: np.random.Generator) -> np.ndarray:
    img = canvas
    if style.blur_radius > 0:
        img = gaussian_filter(img, sigma=(style.blur_radius, style.blur_radius, 0))
    if style.global_hue_shift:
        hsv = rgb_to_hsv(np.clip(img, 0, 255) / 255.0)
        hsv[..., 0] = np.mod(hsv[..., 0] + style.global_hue_shift / 360.0, 1.0)
        img = hsv_to_rgb(hsv) * 255.0
    if style.noise_sigma > 0:
        img = img + rng.normal(0.0, style.noise_sigma, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def render_frame(
    spec: SceneSpec, style: DomainStyle, t: int
) -> tuple[np.ndarray, list[tuple[int, int, tuple[float, float, float, float], float]]]:
    """Render frame ``t``; returns the image and (object id, class, box, visible fraction)."""
    objs = spec.resolved_objects()
    canvas = np.full((spec.height, spec.width, 3), style.background_intensity, dtype=np.float64)
    masks = []
    for o in objs:
        cx, cy = object_center(o, t, spec.width, spec.height)
        m = shape_mask(o.shape, cx, cy, o.size, spec.width, spec.height)
        color = style.object_palette[o.color_index % len(style.object_palette)]
        canvas[m] = color
        masks.append(m)
    # later objects are drawn on top
    covered = np.zeros((spec.height, spec.width), dtype=bool)
    visible = [0.0] * len(objs)
    for i in range(len(objs) - 1, -1, -1):
        m = masks[i]
        total = int(m.sum())
        visible[i] = float((m & ~covered).sum()) / total if total else 0.0
        covered |= m
    annos = []
    for i, (o, m) in enumerate(zip(objs, masks)):
        if not m.any():
            continue
        ys, xs = np.nonzero(m)
        box = (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
        annos.append((i + 1, o.shape, box, visible[i]))
    rng = np.random.default_rng([spec.seed, t, 104729])
    return _apply_style(canvas, style, rng), annos


def generate(spec: SceneSpec, style: DomainStyle, name: Optional[str] = None) -> tuple[Video, TrackingResult]:
    """Render a labeled sequence. Objects hidden below 30% visibility are left out of gt."""
    frames, rows = [], []
    for t in range(spec.num_frames):
        img, annos = render_frame(spec, style, t)
        frames.append(img)
        for oid, cls, box, vis in annos:
            if vis >= MIN_VISIBLE:
                rows.append(TrackRow(t + 1, oid, *box, cls, 1.0))
    video = Video(name or f"seq{spec.seed:05d}", frames)
    return video, TrackingResult(rows, spec.num_frames)


def shift_magnitude(a: DomainStyle, b: DomainStyle) -> float:
    """Weighted L1 distance between styles (intensity units; hue in degrees on the circle)."""
    d = abs(a.background_intensity - b.background_intensity)
    d += 2.0 * abs(a.noise_sigma - b.noise_sigma)
    dh = abs(a.global_hue_shift - b.global_hue_shift) % 360.0
    d += min(dh, 360.0 - dh)
    d += 10.0 * abs(a.blur_radius - b.blur_radius)
    pa, pb = np.asarray(a.object_palette, float), np.asarray(b.object_palette, float)
    n = max(len(pa), len(pb))
    for i in range(n):
        d += np.abs(pa[i % len(pa)] - pb[i % len(pb)]).sum() / (3.0 * n)
    return float(d)


@dataclass(frozen=True)
class BenchmarkConfig:
    seed: int = 0
    source_sequences: int = 6
    target_sequences: int = 4
    num_frames: int = 30
    width: int = 128
    height: int = 96
    objects_range: tuple[int, int] = (2, 4)
    source_style: DomainStyle = SOURCE_STYLE
    target_style: DomainStyle = TARGET_STYLE


@dataclass
class Benchmark:
    source: list[LabeledVideo]
    target: list[LabeledVideo]
    config: BenchmarkConfig

    def target_videos(self) -> list[Video]:
        return [lv.video for lv in self.target]


def scene_specs(cfg: BenchmarkConfig, split: str, count: int) -> list[SceneSpec]:
    rng = np.random.default_rng([cfg.seed, {"source": 1, "target": 2}[split]])
    specs = []
    for _ in range(count):
        specs.append(
            SceneSpec(
                num_objects=int(rng.integers(cfg.objects_range[0], cfg.objects_range[1] + 1)),
                num_frames=cfg.num_frames,
                width=cfg.width,
                height=cfg.height,
                seed=int(rng.integers(0, 2**31 - 1)),
            )
        )
    return specs


def make_benchmark(cfg: BenchmarkConfig = BenchmarkConfig()) -> Benchmark:
    def build(split, count, style):
        out = []
        for i, spec in enumerate(scene_specs(cfg, split, count)):
            video, gt = generate(spec, style, name=f"{split}-{i:02d}")
            out.append(LabeledVideo(video, gt))
        return out

    return Benchmark(
        build("source", cfg.source_sequences, cfg.source_style),
        build("target", cfg.target_sequences, cfg.target_style),
        cfg,
    )


def _png_bytes(img: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def save_sequence(lv: LabeledVideo, root: Path, spec: Optional[SceneSpec] = None,
                  style: Optional[DomainStyle] = None) -> Path:
    """Per-frame PNGs under ``root/<name>/img1``, ``gt/gt.txt`` in MOT CSV, and a manifest."""
    seq_dir = Path(root) / lv.video.name
    for t, frame in enumerate(lv.video.frames):
        atomic_write(seq_dir / "img1" / f"{t + 1:06d}.png", _png_bytes(frame))
    atomic_write(seq_dir / "gt" / "gt.txt", format_mot(lv.gt))
    manifest = {
        "name": lv.video.name,
        "num_frames": len(lv.video),
        "scene": asdict(spec) if spec else None,
        "style": asdict(style) if style else None,
    }
    atomic_write(seq_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return seq_dir


def load_video(seq_dir: Path) -> Video:
    seq_dir = Path(seq_dir)
    frames = [np.asarray(Image.open(p).convert("RGB")) for p in sorted((seq_dir / "img1").glob("*.png"))]
    return Video(seq_dir.name, frames)
