"""Axis-aligned boxes, IoU and the scale -> flip -> crop warps that carry boxes between views.

Boxes are half-open continuous rectangles ``[x1, x2) x [y1, y2)`` in pixels.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int = 0
    confidence: float = 1.0
    track_id: Optional[int] = None

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"invalid box extents {self.as_list()}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def degenerate(self) -> bool:
        return self.area <= 0.0

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


# Detections and boxes share one type; a detection is a box with a confidence.
Detection = BoundingBox


def boxes_to_array(boxes: Sequence[BoundingBox]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([b.as_list() for b in boxes], dtype=np.float64)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` xyxy arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


@dataclass(frozen=True)
class WarpRecord:
    """Geometric view transform: scale, then horizontal flip, then crop.

    ``src_width``/``src_height`` give the source frame size; the flip mirrors
    about the scaled frame width. The output canvas may extend past the
    scaled image (zero padding on the bottom/right).
    """

    scale_x: float
    scale_y: float
    flip_h: bool
    crop_offset_x: float
    crop_offset_y: float
    out_width: int
    out_height: int
    src_width: int
    src_height: int

    def __post_init__(self):
        if self.scale_x <= 0 or self.scale_y <= 0:
            raise ValueError("warp scales must be positive")
        if self.crop_offset_x < 0 or self.crop_offset_y < 0:
            raise ValueError("crop offsets must be non-negative")

    @classmethod
    def identity(cls, width: int, height: int) -> "WarpRecord":
        return cls(1.0, 1.0, False, 0.0, 0.0, width, height, width, height)

    @property
    def scaled_width(self) -> float:
        return self.src_width * self.scale_x

    @property
    def scaled_height(self) -> float:
        return self.src_height * self.scale_y

    @property
    def is_identity(self) -> bool:
        return (
            self.scale_x == 1.0
            and self.scale_y == 1.0
            and not self.flip_h
            and self.crop_offset_x == 0
            and self.crop_offset_y == 0
            and self.out_width == self.src_width
            and self.out_height == self.src_height
        )


def _warp_coords(xyxy: np.ndarray, w: WarpRecord) -> np.ndarray:
    x1 = xyxy[..., 0] * w.scale_x
    x2 = xyxy[..., 2] * w.scale_x
    y1 = xyxy[..., 1] * w.scale_y
    y2 = xyxy[..., 3] * w.scale_y
    if w.flip_h:
        x1, x2 = w.scaled_width - x2, w.scaled_width - x1
    x1 = x1 - w.crop_offset_x
    x2 = x2 - w.crop_offset_x
    y1 = y1 - w.crop_offset_y
    y2 = y2 - w.crop_offset_y
    return np.stack([x1, y1, x2, y2], axis=-1)


def warp_boxes_array(xyxy: np.ndarray, w: WarpRecord) -> tuple[np.ndarray, np.ndarray]:
    """Warp and clip an ``(N, 4)`` array; also returns the keep mask of non-degenerate boxes."""
    out = _warp_coords(np.asarray(xyxy, dtype=np.float64).reshape(-1, 4), w)
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0.0, w.out_width)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0.0, w.out_height)
    keep = (out[:, 2] > out[:, 0]) & (out[:, 3] > out[:, 1])
    return out, keep


def warp_box(b: BoundingBox, w: WarpRecord) -> BoundingBox:
    """Map ``b`` into the warped frame; a fully cropped-out box comes back degenerate."""
    out, keep = warp_boxes_array(np.array([b.as_list()]), w)
    if not keep[0]:
        x = float(np.clip(out[0, 0], 0, w.out_width))
        y = float(np.clip(out[0, 1], 0, w.out_height))
        return replace(b, x1=x, y1=y, x2=x, y2=y)
    x1, y1, x2, y2 = (float(v) for v in out[0])
    return replace(b, x1=x1, y1=y1, x2=x2, y2=y2)


def warp_boxes(boxes: Sequence[BoundingBox], w: WarpRecord) -> list[BoundingBox]:
    """Warp a list of boxes and drop the ones clipped away entirely."""
    warped = (warp_box(b, w) for b in boxes)
    return [b for b in warped if not b.degenerate]


def unwarp_box(b: BoundingBox, w: WarpRecord) -> BoundingBox:
    """Inverse of :func:`warp_box` for boxes inside the crop window (no clipping)."""
    x1 = b.x1 + w.crop_offset_x
    x2 = b.x2 + w.crop_offset_x
    y1 = b.y1 + w.crop_offset_y
    y2 = b.y2 + w.crop_offset_y
    if w.flip_h:
        x1, x2 = w.scaled_width - x2, w.scaled_width - x1
    return replace(
        b, x1=x1 / w.scale_x, y1=y1 / w.scale_y, x2=x2 / w.scale_x, y2=y2 / w.scale_y
    )


def _resize(img: np.ndarray, height: int, width: int, mode: str) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float64)).permute(2, 0, 1)[None]
    if mode == "bilinear":
        out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False)
    else:
        out = F.interpolate(t, size=(height, width), mode="nearest")
    return out[0].permute(1, 2, 0).numpy()


def warp_image(img: np.ndarray, w: WarpRecord, mode: str = "bilinear") -> np.ndarray:
    """Resample an ``(H, W, C)`` image through ``w``; uncovered canvas is zero.

    Output keeps the input dtype. Integer images are rounded after resampling.
    """
    if img.ndim != 3 or img.size == 0:
        raise ValueError("expected a nonempty (H, W, C) image")
    if w.is_identity:
        return img.copy()
    sh = int(round(w.scaled_height))
    sw = int(round(w.scaled_width))
    if (sh, sw) == img.shape[:2]:
        scaled = img.astype(np.float64)
    else:
        scaled = _resize(img, sh, sw, mode)
    if w.flip_h:
        scaled = scaled[:, ::-1]
    out = np.zeros((w.out_height, w.out_width, img.shape[2]), dtype=np.float64)
    ox, oy = int(round(w.crop_offset_x)), int(round(w.crop_offset_y))
    patch = scaled[oy : oy + w.out_height, ox : ox + w.out_width]
    out[: patch.shape[0], : patch.shape[1]] = patch
    if np.issubdtype(img.dtype, np.integer):
        info = np.iinfo(img.dtype)
        out = np.clip(np.rint(out), info.min, info.max)
    return out.astype(img.dtype)
