"""A small two-stage detector with an instance-embedding head.

Weights are plain named tensors held by :class:`ModelWeights`; every
function here is a pure function of (weights, image). The detector has a
three-block strided conv encoder, an anchor-based RPN, a RoI head with
class-agnostic box deltas, and a two-layer embedding head.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torchvision.ops import batched_nms, nms, roi_align

from .geometry import BoundingBox, Detection, boxes_to_array

PIXEL_MEAN = (123.675, 116.28, 103.53)
PIXEL_STD = (58.395, 57.12, 57.375)
RPN_DELTA_WEIGHTS = (1.0, 1.0, 1.0, 1.0)
ROI_DELTA_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
_DELTA_CLAMP = math.log(1000.0 / 16)


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 3  # foreground classes; background is logit 0
    encoder_channels: tuple[int, ...] = (16, 32, 32)
    norm_groups: int = 0  # GroupNorm after each encoder conv; 0 disables
    rpn_channels: int = 32
    anchor_size: float = 16.0
    anchor_ratios: tuple[float, ...] = (1.0, 2.0)  # height / width
    pool_size: int = 4
    roi_hidden: int = 128
    embed_hidden: int = 128
    embed_dim: int = 64
    pre_nms_topk: int = 200
    post_nms_topk: int = 64
    rpn_nms_iou: float = 0.7
    min_box_size: float = 2.0
    max_detections: int = 50

    @property
    def stride(self) -> int:
        return 2 ** len(self.encoder_channels)

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_ratios)


@dataclass(frozen=True)
class DetectConfig:
    score_thr: float = 0.5
    nms_iou: float = 0.5


class ModelWeights:
    """Ordered named parameter tensors plus the config that gives them meaning."""

    def __init__(self, params: "OrderedDict[str, torch.Tensor]", cfg: ModelConfig, step: int = 0):
        self.params = OrderedDict(params)
        self.cfg = cfg
        self.step = step

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.params.values())).dtype

    def clone(self, requires_grad: bool = False) -> "ModelWeights":
        params = OrderedDict(
            (k, v.detach().clone().requires_grad_(requires_grad)) for k, v in self.params.items()
        )
        return ModelWeights(params, self.cfg, self.step)

    def to(self, dtype: torch.dtype) -> "ModelWeights":
        params = OrderedDict((k, v.detach().to(dtype)) for k, v in self.params.items())
        return ModelWeights(params, self.cfg, self.step)

    def trainable(self) -> list[torch.Tensor]:
        return [v for v in self.params.values() if v.requires_grad]

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(v).all()) for v in self.params.values())

    def structure(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, tuple(v.shape)) for k, v in self.params.items()]

    def equal(self, other: "ModelWeights") -> bool:
        return self.structure() == other.structure() and all(
            torch.equal(self[k], other[k]) for k in self.params
        )

    def distance(self, other: "ModelWeights") -> float:
        total = sum(float(((self[k] - other[k]).double() ** 2).sum()) for k in self.params)
        return math.sqrt(total)


def _conv_init(gen: torch.Generator, out_c: int, in_c: int, k: int) -> torch.Tensor:
    fan_in = in_c * k * k
    return torch.randn(out_c, in_c, k, k, generator=gen) * math.sqrt(2.0 / fan_in)


def _fc_init(gen: torch.Generator, out_f: int, in_f: int, std: Optional[float] = None) -> torch.Tensor:
    std = math.sqrt(2.0 / in_f) if std is None else std
    return torch.randn(out_f, in_f, generator=gen) * std


def init_weights(cfg: ModelConfig = ModelConfig(), seed: int = 0, dtype=torch.float32) -> ModelWeights:
    gen = torch.Generator().manual_seed(seed)
    p: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    in_c = 3
    for i, c in enumerate(cfg.encoder_channels):
        p[f"encoder.{i}.weight"] = _conv_init(gen, c, in_c, 3)
        p[f"encoder.{i}.bias"] = torch.zeros(c)
        if cfg.norm_groups:
            p[f"encoder.{i}.norm.weight"] = torch.ones(c)
            p[f"encoder.{i}.norm.bias"] = torch.zeros(c)
        in_c = c
    a = cfg.num_anchors
    p["rpn.conv.weight"] = _conv_init(gen, cfg.rpn_channels, in_c, 3)
    p["rpn.conv.bias"] = torch.zeros(cfg.rpn_channels)
    p["rpn.cls.weight"] = torch.randn(a, cfg.rpn_channels, 1, 1, generator=gen) * 0.01
    p["rpn.cls.bias"] = torch.zeros(a)
    p["rpn.reg.weight"] = torch.randn(4 * a, cfg.rpn_channels, 1, 1, generator=gen) * 0.01
    p["rpn.reg.bias"] = torch.zeros(4 * a)
    pooled = in_c * cfg.pool_size**2
    p["roi.fc.weight"] = _fc_init(gen, cfg.roi_hidden, pooled)
    p["roi.fc.bias"] = torch.zeros(cfg.roi_hidden)
    p["roi.cls.weight"] = _fc_init(gen, cfg.num_classes + 1, cfg.roi_hidden, 0.01)
    p["roi.cls.bias"] = torch.zeros(cfg.num_classes + 1)
    p["roi.reg.weight"] = _fc_init(gen, 4, cfg.roi_hidden, 0.001)
    p["roi.reg.bias"] = torch.zeros(4)
    p["embed.fc1.weight"] = _fc_init(gen, cfg.embed_hidden, pooled)
    p["embed.fc1.bias"] = torch.zeros(cfg.embed_hidden)
    p["embed.norm.weight"] = torch.ones(cfg.embed_hidden)
    p["embed.norm.bias"] = torch.zeros(cfg.embed_hidden)
    p["embed.fc2.weight"] = _fc_init(gen, cfg.embed_dim, cfg.embed_hidden, math.sqrt(1.0 / cfg.embed_hidden))
    p["embed.fc2.bias"] = torch.zeros(cfg.embed_dim)
    p = OrderedDict((k, v.to(dtype)) for k, v in p.items())
    return ModelWeights(p, cfg)


def blend_weights(a: ModelWeights, b: ModelWeights, tau: float) -> ModelWeights:
    """Elementwise ``tau * a + (1 - tau) * b`` (the EMA teacher update)."""
    if a.structure() != b.structure():
        raise ValueError("cannot blend weights with different names or shapes")
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau={tau} outside [0, 1]")
    params = OrderedDict()
    with torch.no_grad():
        for k in a.params:
            if tau == 1.0:
                params[k] = a[k].detach().clone()
            elif tau == 0.0:
                params[k] = b[k].detach().clone()
            else:
                params[k] = tau * a[k].detach() + (1.0 - tau) * b[k].detach()
    return ModelWeights(params, a.cfg, a.step)


# ---------------------------------------------------------------- boxes


def make_anchors(cfg: ModelConfig, feat_h: int, feat_w: int, dtype=torch.float32) -> torch.Tensor:
    """Anchors ordered (row, col, ratio), matching the flattened RPN outputs."""
    s = cfg.stride
    ys = (torch.arange(feat_h, dtype=dtype) + 0.5) * s
    xs = (torch.arange(feat_w, dtype=dtype) + 0.5) * s
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    sizes = []
    for r in cfg.anchor_ratios:
        w = cfg.anchor_size / math.sqrt(r)
        h = cfg.anchor_size * math.sqrt(r)
        sizes.append((w, h))
    wh = torch.tensor(sizes, dtype=dtype)
    cx = cx[..., None].expand(-1, -1, len(sizes))
    cy = cy[..., None].expand(-1, -1, len(sizes))
    w = wh[:, 0].expand_as(cx)
    h = wh[:, 1].expand_as(cy)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1).reshape(-1, 4)


def encode_deltas(ref: torch.Tensor, target: torch.Tensor, weights=RPN_DELTA_WEIGHTS) -> torch.Tensor:
    wx, wy, ww, wh = weights
    rw = ref[:, 2] - ref[:, 0]
    rh = ref[:, 3] - ref[:, 1]
    rx = ref[:, 0] + 0.5 * rw
    ry = ref[:, 1] + 0.5 * rh
    tw = target[:, 2] - target[:, 0]
    th = target[:, 3] - target[:, 1]
    tx = target[:, 0] + 0.5 * tw
    ty = target[:, 1] + 0.5 * th
    return torch.stack(
        [wx * (tx - rx) / rw, wy * (ty - ry) / rh, ww * torch.log(tw / rw), wh * torch.log(th / rh)],
        dim=1,
    )


def decode_deltas(ref: torch.Tensor, deltas: torch.Tensor, weights=RPN_DELTA_WEIGHTS) -> torch.Tensor:
    wx, wy, ww, wh = weights
    rw = ref[:, 2] - ref[:, 0]
    rh = ref[:, 3] - ref[:, 1]
    rx = ref[:, 0] + 0.5 * rw
    ry = ref[:, 1] + 0.5 * rh
    dx, dy = deltas[:, 0] / wx, deltas[:, 1] / wy
    dw = (deltas[:, 2] / ww).clamp(max=_DELTA_CLAMP)
    dh = (deltas[:, 3] / wh).clamp(max=_DELTA_CLAMP)
    cx = rx + dx * rw
    cy = ry + dy * rh
    w = rw * torch.exp(dw)
    h = rh * torch.exp(dh)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=1)


def clip_boxes(boxes: torch.Tensor, width: int, height: int) -> torch.Tensor:
    x = boxes[:, [0, 2]].clamp(0, width)
    y = boxes[:, [1, 3]].clamp(0, height)
    return torch.stack([x[:, 0], y[:, 0], x[:, 1], y[:, 1]], dim=1)


# ---------------------------------------------------------------- network


def to_tensor(img: Union[np.ndarray, torch.Tensor], dtype=torch.float32) -> torch.Tensor:
    """``(H, W, 3)`` RGB in [0, 255] -> normalised ``(1, 3, H, W)`` tensor."""
    if isinstance(img, torch.Tensor):
        if img.dim() == 3:
            img = img[None]
        return img.to(dtype)
    x = torch.from_numpy(np.array(img, copy=True)).to(dtype).permute(2, 0, 1)[None]
    mean = torch.tensor(PIXEL_MEAN, dtype=dtype).view(1, 3, 1, 1)
    std = torch.tensor(PIXEL_STD, dtype=dtype).view(1, 3, 1, 1)
    return (x - mean) / std


@dataclass
class FeatureMap:
    features: torch.Tensor  # [1, C, h, w]
    image_width: int
    image_height: int


@dataclass
class RPNOutput:
    cls: torch.Tensor  # [N] objectness logits
    reg: torch.Tensor  # [N, 4] anchor deltas
    anchors: torch.Tensor  # [N, 4]


@dataclass
class RoIOutput:
    cls: torch.Tensor  # [K, C] logits incl. background at index 0
    reg: torch.Tensor  # [K, 4] class-agnostic deltas
    embeddings: torch.Tensor  # [K, E]
    boxes: torch.Tensor  # [K, 4]


@dataclass
class DetectorOutputs:
    rpn_cls: torch.Tensor
    rpn_reg: torch.Tensor
    roi_cls: torch.Tensor
    roi_reg: torch.Tensor
    embeddings: torch.Tensor
    proposals: list[BoundingBox] = field(default_factory=list)
    anchors: Optional[torch.Tensor] = None


def encode(w: ModelWeights, img) -> FeatureMap:
    x = to_tensor(img, w.dtype)
    _, _, h, wd = x.shape
    s = w.cfg.stride
    if h % s or wd % s:
        raise ValueError(f"image {wd}x{h} is not divisible by the encoder stride {s}")
    for i in range(len(w.cfg.encoder_channels)):
        x = F.conv2d(x, w[f"encoder.{i}.weight"], w[f"encoder.{i}.bias"], stride=2, padding=1)
        if w.cfg.norm_groups:
            x = F.group_norm(x, w.cfg.norm_groups, w[f"encoder.{i}.norm.weight"], w[f"encoder.{i}.norm.bias"])
        x = F.relu(x)
    return FeatureMap(x, wd, h)


def rpn_head(w: ModelWeights, fm: FeatureMap) -> RPNOutput:
    h = F.relu(F.conv2d(fm.features, w["rpn.conv.weight"], w["rpn.conv.bias"], padding=1))
    a = w.cfg.num_anchors
    cls = F.conv2d(h, w["rpn.cls.weight"], w["rpn.cls.bias"])  # [1, A, h, w]
    reg = F.conv2d(h, w["rpn.reg.weight"], w["rpn.reg.bias"])  # [1, 4A, h, w]
    fh, fw = cls.shape[-2:]
    cls = cls[0].permute(1, 2, 0).reshape(-1)
    reg = reg[0].reshape(a, 4, fh, fw).permute(2, 3, 0, 1).reshape(-1, 4)
    anchors = make_anchors(w.cfg, fh, fw, dtype=cls.dtype)
    return RPNOutput(cls, reg, anchors)


def propose(w: ModelWeights, fm: FeatureMap, rpn: RPNOutput) -> torch.Tensor:
    """Score-ranked top-k RPN proposals after NMS (no gradient)."""
    cfg = w.cfg
    with torch.no_grad():
        scores = rpn.cls.detach()
        k = min(cfg.pre_nms_topk, scores.numel())
        top = scores.topk(k).indices
        boxes = decode_deltas(rpn.anchors[top], rpn.reg.detach()[top])
        boxes = clip_boxes(boxes, fm.image_width, fm.image_height)
        s = scores[top]
        ok = ((boxes[:, 2] - boxes[:, 0]) >= cfg.min_box_size) & (
            (boxes[:, 3] - boxes[:, 1]) >= cfg.min_box_size
        )
        boxes, s = boxes[ok], s[ok]
        keep = nms(boxes.float(), s.float(), cfg.rpn_nms_iou)[: cfg.post_nms_topk]
        return boxes[keep]


def roi_heads(w: ModelWeights, fm: FeatureMap, boxes: torch.Tensor, with_embed: bool = True) -> RoIOutput:
    cfg = w.cfg
    boxes = boxes.to(fm.features.dtype).reshape(-1, 4)
    dtype = fm.features.dtype
    if boxes.shape[0] == 0:
        c = cfg.num_classes + 1
        zero = fm.features.sum() * 0.0
        return RoIOutput(
            torch.zeros(0, c, dtype=dtype) + zero,
            torch.zeros(0, 4, dtype=dtype) + zero,
            torch.zeros(0, cfg.embed_dim, dtype=dtype) + zero,
            boxes,
        )
    rois = torch.cat([torch.zeros(boxes.shape[0], 1, dtype=dtype), boxes.detach()], dim=1)
    pooled = roi_align(
        fm.features, rois, output_size=cfg.pool_size, spatial_scale=1.0 / cfg.stride,
        sampling_ratio=2, aligned=True,
    ).flatten(1)
    hidden = F.relu(F.linear(pooled, w["roi.fc.weight"], w["roi.fc.bias"]))
    cls = F.linear(hidden, w["roi.cls.weight"], w["roi.cls.bias"])
    reg = F.linear(hidden, w["roi.reg.weight"], w["roi.reg.bias"])
    if with_embed:
        e = F.linear(pooled, w["embed.fc1.weight"], w["embed.fc1.bias"])
        e = F.layer_norm(e, (e.shape[1],), w["embed.norm.weight"], w["embed.norm.bias"])
        emb = F.linear(F.relu(e), w["embed.fc2.weight"], w["embed.fc2.bias"])
    else:
        emb = torch.zeros(boxes.shape[0], cfg.embed_dim, dtype=dtype)
    return RoIOutput(cls, reg, emb, boxes)


def _as_box_tensor(rois: Sequence[BoundingBox] | torch.Tensor | np.ndarray, dtype) -> torch.Tensor:
    if isinstance(rois, torch.Tensor):
        return rois.to(dtype).reshape(-1, 4)
    if isinstance(rois, np.ndarray):
        return torch.as_tensor(rois, dtype=dtype).reshape(-1, 4)
    return torch.as_tensor(boxes_to_array(list(rois)), dtype=dtype).reshape(-1, 4)


def tensor_to_boxes(boxes: torch.Tensor) -> list[BoundingBox]:
    return [BoundingBox(*(float(v) for v in row)) for row in boxes.detach().double().tolist()]


def forward(w: ModelWeights, img, rois=None) -> DetectorOutputs:
    """Full detector pass. With ``rois`` the RoI/embedding heads run exactly on them."""
    fm = encode(w, img)
    rpn = rpn_head(w, fm)
    if rois is None:
        boxes = propose(w, fm, rpn)
    else:
        boxes = _as_box_tensor(rois, fm.features.dtype)
    roi = roi_heads(w, fm, boxes)
    return DetectorOutputs(
        rpn.cls, rpn.reg, roi.cls, roi.reg, roi.embeddings, tensor_to_boxes(boxes), rpn.anchors
    )


def postprocess(
    w: ModelWeights, fm: FeatureMap, roi: RoIOutput, score_thr: float, nms_iou: float
) -> tuple[list[Detection], torch.Tensor]:
    """Turn RoI outputs into class-wise NMS'd detections; also returns their RoI indices."""
    cfg = w.cfg
    with torch.no_grad():
        if roi.cls.shape[0] == 0:
            return [], torch.zeros(0, dtype=torch.long)
        probs = roi.cls.detach().softmax(dim=1)[:, 1:]
        boxes = decode_deltas(roi.boxes, roi.reg.detach(), ROI_DELTA_WEIGHTS)
        boxes = clip_boxes(boxes, fm.image_width, fm.image_height)
        k, c = probs.shape
        roi_idx = torch.arange(k)[:, None].expand(k, c).reshape(-1)
        labels = torch.arange(c)[None, :].expand(k, c).reshape(-1)
        scores = probs.reshape(-1)
        cand = scores > score_thr
        roi_idx, labels, scores = roi_idx[cand], labels[cand], scores[cand]
        cand_boxes = boxes[roi_idx]
        ok = (cand_boxes[:, 2] > cand_boxes[:, 0]) & (cand_boxes[:, 3] > cand_boxes[:, 1])
        roi_idx, labels, scores, cand_boxes = roi_idx[ok], labels[ok], scores[ok], cand_boxes[ok]
        keep = batched_nms(cand_boxes.float(), scores.float(), labels, nms_iou)[: cfg.max_detections]
        dets = [
            Detection(*(float(v) for v in cand_boxes[i].double().tolist()),
                      class_id=int(labels[i]), confidence=min(max(float(scores[i]), 0.0), 1.0))
            for i in keep.tolist()
        ]
        return dets, roi_idx[keep]


def detect(w: ModelWeights, img, score_thr: float = 0.5, nms_iou: float = 0.5) -> list[Detection]:
    """Detections sorted by descending confidence."""
    dets, _ = detect_with_embeddings(w, img, score_thr, nms_iou)
    return dets


def detect_with_embeddings(
    w: ModelWeights, img, score_thr: float = 0.5, nms_iou: float = 0.5
) -> tuple[list[Detection], np.ndarray]:
    """Detections plus embeddings re-extracted on the final (refined) boxes."""
    if not (0.0 <= score_thr <= 1.0 and 0.0 <= nms_iou <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    with torch.no_grad():
        fm = encode(w, img)
        rpn = rpn_head(w, fm)
        roi = roi_heads(w, fm, propose(w, fm, rpn), with_embed=False)
        dets, _ = postprocess(w, fm, roi, score_thr, nms_iou)
        if not dets:
            return [], np.zeros((0, w.cfg.embed_dim))
        emb = roi_heads(w, fm, _as_box_tensor(dets, fm.features.dtype)).embeddings
        return dets, emb.double().numpy()


def nms_detections(dets: Sequence[Detection], nms_iou: float) -> list[Detection]:
    """Class-wise NMS over detection objects, sorted by confidence."""
    if not dets:
        return []
    boxes = torch.as_tensor(boxes_to_array(dets))
    scores = torch.tensor([d.confidence for d in dets], dtype=torch.float64)
    labels = torch.tensor([d.class_id for d in dets])
    keep = batched_nms(boxes, scores, labels, nms_iou)
    return [dets[i] for i in keep.tolist()]


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(w: ModelWeights, path: Union[str, Path], extra: Optional[dict] = None) -> None:
    """Write ``<path>`` (npz archive) and ``<path>.json`` (manifest), each atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: v.detach().cpu().numpy() for k, v in w.params.items()}
    manifest = {
        "names": list(arrays),
        "shapes": [list(a.shape) for a in arrays.values()],
        "dtype": str(next(iter(arrays.values())).dtype),
        "global_step": int(w.step),
        "model_config": asdict(w.cfg),
    }
    if extra:
        manifest.update(extra)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".npz")
    os.close(fd)
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)
    _atomic_write_text(Path(str(path) + ".json"), json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: Union[str, Path]) -> ModelWeights:
    path = Path(path)
    manifest = json.loads(Path(str(path) + ".json").read_text())
    raw = manifest["model_config"]
    cfg = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})
    with np.load(path) as data:
        params = OrderedDict((name, torch.from_numpy(data[name].copy())) for name in manifest["names"])
    return ModelWeights(params, cfg, int(manifest.get("global_step", 0)))


def _atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)
