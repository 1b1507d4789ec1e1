"""Supervised detection and embedding losses used for source pretraining and SFOD."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torchvision.ops import box_iou

from . import losses
from .geometry import BoundingBox
from .matching import AssignedRoI, Polarity, View, build_match_table, sample_rois
from .model import (
    ROI_DELTA_WEIGHTS,
    FeatureMap,
    ModelWeights,
    RPNOutput,
    encode_deltas,
    roi_heads,
)


def _smooth_l1(x: torch.Tensor, beta: float) -> torch.Tensor:
    return F.smooth_l1_loss(x, torch.zeros_like(x), beta=beta, reduction="sum")


def _pick(mask: torch.Tensor, n: int, rng: np.random.Generator) -> torch.Tensor:
    idx = torch.nonzero(mask).flatten()
    if idx.numel() > n:
        idx = idx[torch.as_tensor(np.sort(rng.permutation(idx.numel())[:n]))]
    return idx


def rpn_loss(
    rpn: RPNOutput,
    gt_boxes: torch.Tensor,
    rng: np.random.Generator,
    batch: int = 128,
    pos_fraction: float = 0.5,
) -> torch.Tensor:
    anchors = rpn.anchors
    labels = torch.zeros(anchors.shape[0], dtype=torch.long)  # 0 neg, 1 pos, -1 ignore
    matched = torch.zeros(anchors.shape[0], dtype=torch.long)
    if gt_boxes.shape[0]:
        ious = box_iou(anchors.double(), gt_boxes.double())
        best, matched = ious.max(dim=1)
        labels[:] = -1
        labels[best < 0.3] = 0
        labels[best >= 0.7] = 1
        # every gt keeps its best anchors, even below 0.7
        top = ious.max(dim=0).values
        for g in range(gt_boxes.shape[0]):
            if top[g] > 0.1:
                hit = torch.nonzero(ious[:, g] == top[g]).flatten()
                labels[hit] = 1
                matched[hit] = g
    pos = _pick(labels == 1, int(batch * pos_fraction), rng)
    neg = _pick(labels == 0, batch - pos.numel(), rng)
    idx = torch.cat([pos, neg])
    target = torch.cat([torch.ones(pos.numel()), torch.zeros(neg.numel())]).to(rpn.cls.dtype)
    cls_loss = F.binary_cross_entropy_with_logits(rpn.cls[idx], target, reduction="sum")
    reg_loss = rpn.cls.sum() * 0.0
    if pos.numel():
        deltas = encode_deltas(anchors[pos], gt_boxes[matched[pos]].to(anchors.dtype))
        reg_loss = _smooth_l1(rpn.reg[pos] - deltas, beta=1.0 / 9)
    return (cls_loss + reg_loss) / max(idx.numel(), 1)


def roi_loss(
    w: ModelWeights,
    fm: FeatureMap,
    proposals: torch.Tensor,
    gt_boxes: torch.Tensor,
    gt_labels: torch.Tensor,
    rng: np.random.Generator,
    batch: int = 64,
    pos_fraction: float = 0.25,
) -> torch.Tensor:
    """Classification + class-agnostic box regression on sampled proposals (gt boxes appended)."""
    boxes = torch.cat([proposals.to(fm.features.dtype), gt_boxes.to(fm.features.dtype)])
    labels = torch.zeros(boxes.shape[0], dtype=torch.long)
    matched = torch.zeros(boxes.shape[0], dtype=torch.long)
    if gt_boxes.shape[0]:
        ious = box_iou(boxes.double(), gt_boxes.double())
        best, matched = ious.max(dim=1)
        labels = torch.where(best >= 0.5, gt_labels[matched] + 1, torch.zeros_like(matched))
    pos = _pick(labels > 0, int(batch * pos_fraction), rng)
    neg = _pick(labels == 0, batch - pos.numel(), rng)
    idx = torch.cat([pos, neg])
    out = roi_heads(w, fm, boxes[idx], with_embed=False)
    loss = F.cross_entropy(out.cls, labels[idx], reduction="sum")
    if pos.numel():
        deltas = encode_deltas(boxes[pos], gt_boxes[matched[pos]].to(boxes.dtype), ROI_DELTA_WEIGHTS)
        loss = loss + _smooth_l1(out.reg[: pos.numel()] - deltas, beta=1.0)
    return loss / max(idx.numel(), 1)


def _assign_ids(
    rois: torch.Tensor, gt_boxes: torch.Tensor, gt_ids: Sequence[int], view: View, a1=0.7, a2=0.3
) -> list[AssignedRoI]:
    out = []
    if gt_boxes.shape[0] == 0:
        ious = torch.zeros(rois.shape[0], 0)
    else:
        ious = box_iou(rois.double(), gt_boxes.double())
    for i in range(rois.shape[0]):
        box = BoundingBox(*(float(v) for v in rois[i].tolist()))
        if ious.shape[1] == 0:
            out.append(AssignedRoI(box, view, None, Polarity.NEGATIVE, 0.0, i))
            continue
        m, j = ious[i].max(dim=0)
        m = float(m)
        pol = Polarity.POSITIVE if m >= a1 else Polarity.NEGATIVE if m < a2 else Polarity.IGNORE
        out.append(AssignedRoI(box, view, int(gt_ids[int(j)]), pol, m, i))
    return out


def embedding_loss(
    w: ModelWeights,
    key: tuple[FeatureMap, torch.Tensor, torch.Tensor, Sequence[int]],
    ref: tuple[FeatureMap, torch.Tensor, torch.Tensor, Sequence[int]],
    rng: np.random.Generator,
    n_key: int = 32,
    n_ref: int = 64,
    gammas: tuple[float, float] = (0.25, 1.0),
) -> torch.Tensor:
    """Quasi-dense instance matching between two labeled frames of one sequence.

    ``key``/``ref`` are ``(features, proposals, gt_boxes, gt_ids)``; RoIs on the
    two frames are positives of each other when they cover the same identity.
    """
    fk, pk, gk, ik = key
    fr, pr, gr, ir = ref
    rois_k = torch.cat([pk.to(gk.dtype), gk]) if gk.numel() else pk
    rois_r = torch.cat([pr.to(gr.dtype), gr]) if gr.numel() else pr
    ak = sample_rois(_assign_ids(rois_k, gk, ik, View.STUDENT), n_key, float("inf"), rng)
    ar = sample_rois(_assign_ids(rois_r, gr, ir, View.CONTRASTIVE), n_ref, 1.0, rng)
    table = build_match_table(ak, ar)
    if table.empty:
        return fk.features.sum() * 0.0
    kb = rois_k[[s.roi_index for s in table.student_samples]]
    rb = rois_r[[t.roi_index for t in table.contrastive_targets]]
    v = roi_heads(w, fk, kb).embeddings
    k = roi_heads(w, fr, rb).embeddings
    labels = torch.as_tensor(table.pair_labels)
    pairs = losses.sample_aux_pairs(table.pair_labels, rng)
    return gammas[0] * losses.pcl_embed(v, k, labels) + gammas[1] * losses.pcl_aux(v, k, pairs)
