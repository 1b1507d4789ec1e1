"""Teacher / student / contrastive view generation.

The teacher view is a geometric warp of the frame, the student view is a
photometric distortion of the teacher view (so both stay pixel aligned),
and the contrastive view gets its own geometric warp and photometric
distortion.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .geometry import WarpRecord, warp_image

STAGES = (
    "brightness",
    "contrast_first",
    "to_hsv",
    "saturation",
    "hue",
    "from_hsv",
    "contrast_last",
    "swap_channels",
)
VIEW_ROLES = {"teacher": 0, "student": 1, "contrastive": 2, "sample": 3}

SeedLike = Union[int, Sequence[int]]


@dataclass(frozen=True)
class AugConfig:
    base_width: int = 128
    scale_range: tuple[float, float] = (0.8, 1.2)
    flip_prob: float = 0.5
    stride: int = 8
    # Policy switches: geometric warps for teacher / contrastive views,
    # photometric distortion for student / contrastive views.
    teacher_geometric: bool = True
    contrastive_geometric: bool = True
    student_photometric: bool = True
    contrastive_photometric: bool = True
    stage_prob: float = 0.5
    brightness_delta: float = 32.0
    contrast_range: tuple[float, float] = (0.5, 1.5)
    saturation_range: tuple[float, float] = (0.5, 1.5)
    hue_delta: float = 18.0

    @classmethod
    def disabled(cls, **kw) -> "AugConfig":
        return cls(
            teacher_geometric=False,
            contrastive_geometric=False,
            student_photometric=False,
            contrastive_photometric=False,
            **kw,
        )


@dataclass(frozen=True)
class PhotometricParams:
    brightness_delta: float = 0.0
    contrast_factor: float = 1.0
    saturation_factor: float = 1.0
    hue_delta: float = 0.0
    swap_channels: tuple[int, int, int] = (0, 1, 2)
    apply_flags: tuple[bool, ...] = (False,) * 8

    def __post_init__(self):
        if self.contrast_factor <= 0 or self.saturation_factor <= 0:
            raise ValueError("photometric factors must be positive")
        if sorted(self.swap_channels) != [0, 1, 2]:
            raise ValueError(f"{self.swap_channels} is not a permutation of (0, 1, 2)")
        if len(self.apply_flags) != len(STAGES):
            raise ValueError("need one apply flag per photometric stage")

    @classmethod
    def only(cls, **stages) -> "PhotometricParams":
        """Build params with exactly the named stages switched on, e.g. ``only(brightness=10)``."""
        values = {}
        flags = [False] * len(STAGES)
        names = {
            "brightness": ("brightness_delta", [0]),
            "contrast": ("contrast_factor", [1]),
            "saturation": ("saturation_factor", [2, 3, 5]),
            "hue": ("hue_delta", [2, 4, 5]),
            "swap_channels": ("swap_channels", [7]),
        }
        for key, value in stages.items():
            attr, idx = names[key]
            values[attr] = tuple(value) if key == "swap_channels" else value
            for i in idx:
                flags[i] = True
        return cls(apply_flags=tuple(flags), **values)


@dataclass
class ViewBundle:
    image_teacher: np.ndarray
    image_student: np.ndarray
    image_contrastive: np.ndarray
    warp_teacher: WarpRecord
    warp_contrastive: WarpRecord
    photo_student: PhotometricParams
    photo_contrastive: PhotometricParams
    seed: tuple[int, ...] = field(default_factory=tuple)


def view_rng(seed: SeedLike, role: str) -> np.random.Generator:
    """Counter-style generator keyed by the seed tuple and the view role."""
    key = [int(s) for s in np.atleast_1d(np.asarray(seed, dtype=np.int64))]
    return np.random.default_rng(key + [VIEW_ROLES[role]])


def sample_geometric(
    rng: np.random.Generator, cfg: AugConfig, src_width: int, src_height: int
) -> WarpRecord:
    """Random rescale (aspect kept), horizontal flip, and crop to ``cfg.base_width``."""
    if cfg.base_width <= 0:
        raise ValueError("base_width must be positive")
    lo, hi = cfg.scale_range
    new_w = int(round(rng.uniform(lo, hi) * cfg.base_width)) if hi > lo else int(round(lo * cfg.base_width))
    new_w = max(new_w, 1)
    scale_x = new_w / src_width
    new_h = max(int(round(src_height * scale_x)), 1)
    scale_y = new_h / src_height
    flip = bool(rng.random() < cfg.flip_prob)
    crop_x = int(rng.integers(0, new_w - cfg.base_width + 1)) if new_w > cfg.base_width else 0
    out_w = min(new_w, cfg.base_width)
    s = cfg.stride
    out_w = int(math.ceil(out_w / s) * s)
    out_h = int(math.ceil(new_h / s) * s)
    return WarpRecord(scale_x, scale_y, flip, float(crop_x), 0.0, out_w, out_h, src_width, src_height)


def sample_photometric(rng: np.random.Generator, cfg: AugConfig) -> PhotometricParams:
    p = cfg.stage_prob
    use_brightness = rng.random() < p
    brightness = rng.uniform(-cfg.brightness_delta, cfg.brightness_delta)
    use_contrast = rng.random() < p
    contrast_mode = int(rng.integers(0, 2))
    contrast = rng.uniform(*cfg.contrast_range)
    use_saturation = rng.random() < p
    saturation = rng.uniform(*cfg.saturation_range)
    use_hue = rng.random() < p
    hue = rng.uniform(-cfg.hue_delta, cfg.hue_delta)
    use_swap = rng.random() < p
    perm = tuple(int(i) for i in rng.permutation(3))
    hsv = use_saturation or use_hue
    flags = (
        bool(use_brightness),
        bool(use_contrast and contrast_mode == 0),
        bool(hsv),
        bool(use_saturation),
        bool(use_hue),
        bool(hsv),
        bool(use_contrast and contrast_mode == 1),
        bool(use_swap),
    )
    return PhotometricParams(float(brightness), float(contrast), float(saturation), float(hue), perm, flags)


def apply_photometric(img: np.ndarray, p: PhotometricParams) -> np.ndarray:
    """Apply the ordered eight-stage photometric distortion to an RGB image in [0, 255]."""
    if not any(p.apply_flags):
        return img.copy()
    f = p.apply_flags
    x = img.astype(np.float64)
    if f[0]:
        x = x + p.brightness_delta
    if f[1]:
        x = x * p.contrast_factor
    if f[2] and (f[3] or f[4]):
        hsv = rgb_to_hsv(np.clip(x, 0.0, 255.0) / 255.0)
        if f[3]:
            hsv[..., 1] = np.clip(hsv[..., 1] * p.saturation_factor, 0.0, 1.0)
        if f[4]:
            hsv[..., 0] = np.mod(hsv[..., 0] + p.hue_delta / 360.0, 1.0)
        if f[5]:
            x = hsv_to_rgb(hsv) * 255.0
    if f[6]:
        x = x * p.contrast_factor
    if f[7]:
        x = x[..., list(p.swap_channels)]
    x = np.clip(x, 0.0, 255.0)
    if np.issubdtype(img.dtype, np.integer):
        x = np.rint(x)
    return x.astype(img.dtype)


def make_views(img: np.ndarray, rng_seed: SeedLike, cfg: AugConfig) -> ViewBundle:
    """Generate the three training views of one frame; a pure function of its inputs."""
    if img.size == 0:
        raise ValueError("empty image")
    h, w = img.shape[:2]
    identity = WarpRecord.identity(w, h)
    neutral = PhotometricParams()

    warp_t = sample_geometric(view_rng(rng_seed, "teacher"), cfg, w, h) if cfg.teacher_geometric else identity
    x_t = warp_image(img, warp_t)
    photo_s = sample_photometric(view_rng(rng_seed, "student"), cfg) if cfg.student_photometric else neutral
    x_s = apply_photometric(x_t, photo_s)

    crng = view_rng(rng_seed, "contrastive")
    warp_c = sample_geometric(crng, cfg, w, h) if cfg.contrastive_geometric else identity
    photo_c = sample_photometric(crng, cfg) if cfg.contrastive_photometric else neutral
    x_c = apply_photometric(warp_image(img, warp_c), photo_c)

    seed = tuple(int(s) for s in np.atleast_1d(np.asarray(rng_seed, dtype=np.int64)))
    return ViewBundle(x_t, x_s, x_c, warp_t, warp_c, photo_s, photo_c, seed)
