"""Source pretraining, the DARTH adaptation step/loop, and the SFOD baseline."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import losses
from .geometry import BoundingBox, WarpRecord, boxes_to_array, unwarp_box, warp_box, warp_boxes_array, warp_image
from .losses import LossBreakdown, NumericDomainError
from .matching import (
    MatchTable,
    View,
    assign_rois,
    build_match_table,
    filter_detections,
    sample_rois,
)
from .model import (
    DetectConfig,
    ModelConfig,
    ModelWeights,
    blend_weights,
    encode,
    init_weights,
    postprocess,
    propose,
    roi_heads,
    rpn_head,
    tensor_to_boxes,
)
from .mot_io import LabeledVideo, Video
from .supervised import embedding_loss, roi_loss, rpn_loss
from .views import AugConfig, apply_photometric, make_views, sample_geometric, sample_photometric, view_rng

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class AdaptConfig:
    tau: float = 0.998
    gamma_conf: float = 0.7
    lr: float = 0.01
    momentum: float = 0.0
    weight_decay: float = 0.0
    grad_clip_norm: float = 35.0
    epochs: int = 4
    lr_decay_epochs: tuple[int, ...] = (3,)
    lr_decay_factor: float = 0.1
    gammas: tuple[float, float, float, float] = losses.DEFAULT_GAMMAS
    n_student: int = 32
    n_contrastive: int = 64
    contrastive_pos_ratio: float = 1.0
    alpha_pos: float = 0.7
    alpha_neg: float = 0.3
    epsilon: float = 0.1
    aux_neg_per_pos: int = 3
    use_pcl: bool = True
    use_dc: bool = True
    use_ema: bool = True
    seed: int = 0
    aug: AugConfig = AugConfig()
    detect: DetectConfig = DetectConfig()

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if not 0.0 <= self.gamma_conf <= 1.0:
            raise ValueError("gamma_conf must lie in [0, 1]")
        if self.lr < 0 or self.grad_clip_norm <= 0 or self.epochs < 0:
            raise ValueError("lr, grad_clip_norm and epochs must be non-negative")


@dataclass
class AdaptState:
    student: ModelWeights
    teacher: ModelWeights
    config: AdaptConfig
    optimizer_state: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0
    lr: Optional[float] = None
    last_grad_norm: float = 0.0

    @property
    def tau(self) -> float:
        return self.config.tau if self.config.use_ema else 1.0

    @classmethod
    def start(cls, source: ModelWeights, config: AdaptConfig) -> "AdaptState":
        return cls(source.clone(), source.clone(), config, lr=config.lr)


# ---------------------------------------------------------------- optimisation


def clip_gradients(grads: list[torch.Tensor], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; returns the new norm."""
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g.mul_(scale)
        total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))
    return total


def sgd_update(
    w: ModelWeights,
    grads: dict[str, torch.Tensor],
    opt_state: dict[str, torch.Tensor],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
) -> ModelWeights:
    """Return new weights after one SGD step; parameters without a gradient are copied."""
    new = w.clone()
    with torch.no_grad():
        for name, g in grads.items():
            p = new.params[name]
            d = g + weight_decay * p if weight_decay else g
            if momentum:
                buf = opt_state.get(name)
                buf = d.clone() if buf is None else buf.mul_(momentum).add_(d)
                opt_state[name] = buf
                d = buf
            p.sub_(lr * d)
    new.step = w.step + 1
    return new


def _gradients(total: torch.Tensor, w: ModelWeights, frozen_prefixes: Sequence[str] = ()) -> dict[str, torch.Tensor]:
    names = [n for n in w.names() if not n.startswith(tuple(frozen_prefixes))]
    params = [w.params[n] for n in names]
    grads = torch.autograd.grad(total, params, allow_unused=True)
    return {n: (g if g is not None else torch.zeros_like(p)) for n, p, g in zip(names, params, grads)}


# ---------------------------------------------------------------- source pretraining


@dataclass(frozen=True)
class PretrainConfig:
    iterations: int = 4000
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_at: tuple[float, ...] = (0.75,)
    grad_clip_norm: float = 35.0
    ref_gap: int = 3
    embed_weight: float = 1.0
    seed: int = 0
    photometric: bool = True
    aug: AugConfig = AugConfig()
    model: ModelConfig = ModelConfig()


def _gt_arrays(lv: LabeledVideo, t: int) -> tuple[np.ndarray, np.ndarray, list[int]]:
    rows = [r for r in lv.gt.rows if r.frame == t + 1 and r.conf != 0]
    boxes = np.array([r.box for r in rows], dtype=np.float64).reshape(-1, 4)
    labels = np.array([r.class_id for r in rows], dtype=np.int64)
    ids = [r.track_id for r in rows]
    return boxes, labels, ids


def _augment_labeled(img, boxes, labels, ids, warp: WarpRecord):
    out = warp_image(img, warp)
    wb, keep = warp_boxes_array(boxes, warp)
    return out, wb[keep], labels[keep], [i for i, k in zip(ids, keep) if k]


def pretrain_source(
    dataset: Sequence[LabeledVideo],
    cfg: PretrainConfig = PretrainConfig(),
    init: Optional[ModelWeights] = None,
    progress: Optional[Callable[[int, float], None]] = None,
) -> ModelWeights:
    """Supervised source training: RPN + RoI detection losses and quasi-dense embedding loss."""
    if not dataset:
        raise ValueError("no labeled source sequences")
    w = init.clone() if init is not None else init_weights(cfg.model, seed=cfg.seed)
    if cfg.iterations <= 0:
        return w
    rng = np.random.default_rng([cfg.seed, 17])
    opt_state: dict[str, torch.Tensor] = {}
    milestones = [int(f * cfg.iterations) for f in cfg.lr_decay_at]
    for it in range(cfg.iterations):
        lr = cfg.lr * (0.1 ** sum(it >= m for m in milestones))
        lv = dataset[int(rng.integers(len(dataset)))]
        n = len(lv.video)
        t = int(rng.integers(n))
        t_ref = int(np.clip(t + rng.integers(-cfg.ref_gap, cfg.ref_gap + 1), 0, n - 1))
        live = w.clone(requires_grad=True)
        views = []
        for k, tt in enumerate((t, t_ref)):
            img = lv.video.frames[tt]
            boxes, labels, ids = _gt_arrays(lv, tt)
            warp = sample_geometric(view_rng((cfg.seed, it, k), "sample"), cfg.aug, img.shape[1], img.shape[0])
            img, boxes, labels, ids = _augment_labeled(img, boxes, labels, ids, warp)
            if cfg.photometric:
                img = apply_photometric(img, sample_photometric(view_rng((cfg.seed, it, k), "student"), cfg.aug))
            fm = encode(live, img)
            rpn = rpn_head(live, fm)
            props = propose(live, fm, rpn)
            gb = torch.as_tensor(boxes, dtype=live.dtype)
            views.append((fm, rpn, props, gb, torch.as_tensor(labels), ids))
        total = 0.0
        for fm, rpn, props, gb, gl, _ in views:
            total = total + rpn_loss(rpn, gb, rng) + roi_loss(live, fm, props, gb, gl, rng)
        if cfg.embed_weight:
            (fk, _, pk, gk, _, ik), (fr, _, pr, gr, _, ir) = views
            total = total + cfg.embed_weight * embedding_loss(live, (fk, pk, gk, ik), (fr, pr, gr, ir), rng)
        value = float(total.detach())
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite pretraining loss at iteration {it}")
        grads = _gradients(total, live)
        clip_gradients(list(grads.values()), cfg.grad_clip_norm)
        w = sgd_update(w, grads, opt_state, lr, cfg.momentum, cfg.weight_decay)
        if progress is not None:
            progress(it, value)
    return w


# ---------------------------------------------------------------- DARTH


def _to_contrastive(dets: Sequence[BoundingBox], warp_t: WarpRecord, warp_c: WarpRecord) -> tuple[list[BoundingBox], list[int]]:
    """Carry teacher-view detections into the contrastive view; returns boxes and their source indices."""
    out, idx = [], []
    for i, d in enumerate(dets):
        b = warp_box(unwarp_box(d, warp_t), warp_c)
        if not b.degenerate:
            out.append(b)
            idx.append(i)
    return out, idx


def _boxes_tensor(boxes: Sequence[BoundingBox], dtype) -> torch.Tensor:
    return torch.as_tensor(boxes_to_array(list(boxes)), dtype=dtype).reshape(-1, 4)


def _remap(assigned, index_map):
    return [replace(a, assigned_det=index_map[a.assigned_det]) if a.assigned_det is not None else a for a in assigned]


def adapt_step(state: AdaptState, frame: np.ndarray, seed) -> tuple[AdaptState, LossBreakdown]:
    """One teacher-student update on a single target frame."""
    cfg = state.config
    rng = view_rng(seed, "sample")
    bundle = make_views(frame, seed, cfg.aug)
    teacher = state.teacher
    student = state.student.clone(requires_grad=True)
    dtype = student.dtype

    # Teacher on the clean teacher view: detections, RPN targets and its own proposals.
    with torch.no_grad():
        fm_t = encode(teacher, bundle.image_teacher)
        rpn_t = rpn_head(teacher, fm_t)
        props_t = propose(teacher, fm_t, rpn_t)
        roi_t = roi_heads(teacher, fm_t, props_t, with_embed=False)
        dets, _ = postprocess(teacher, fm_t, roi_t, cfg.detect.score_thr, cfg.detect.nms_iou)
    kept = filter_detections(dets, cfg.gamma_conf)

    fm_s = encode(student, bundle.image_student)
    rpn_s = rpn_head(student, fm_s)

    zero = fm_s.features.sum() * 0.0
    embed = aux = dc_rpn = dc_roi = zero
    if cfg.use_dc:
        dc_rpn = losses.dc_rpn(rpn_t.cls, rpn_t.reg, rpn_s.cls, rpn_s.reg, cfg.epsilon)
        roi_s = roi_heads(student, fm_s, props_t, with_embed=False)
        dc_roi = losses.dc_roi(roi_t.cls, roi_t.reg, roi_s.cls, roi_s.reg)

    if cfg.use_pcl and kept:
        # Student view is pixel-aligned with the teacher view: boxes carry over unchanged.
        dets_s = kept
        dets_c, c_index = _to_contrastive(kept, bundle.warp_teacher, bundle.warp_contrastive)
        fm_c = encode(student, bundle.image_contrastive)
        rpn_c = rpn_head(student, fm_c)
        with torch.no_grad():
            rois_s = torch.cat([propose(student, fm_s, rpn_s), _boxes_tensor(dets_s, dtype)])
            rois_c = torch.cat([propose(student, fm_c, rpn_c), _boxes_tensor(dets_c, dtype)])
        a_s = assign_rois(tensor_to_boxes(rois_s), dets_s, cfg.alpha_pos, cfg.alpha_neg, View.STUDENT)
        a_c = assign_rois(tensor_to_boxes(rois_c), dets_c, cfg.alpha_pos, cfg.alpha_neg, View.CONTRASTIVE)
        a_c = _remap(a_c, c_index)
        s_samples = sample_rois(a_s, cfg.n_student, float("inf"), rng)
        c_samples = sample_rois(a_c, cfg.n_contrastive, cfg.contrastive_pos_ratio, rng)
        table = build_match_table(s_samples, c_samples)
        if not table.empty:
            v = roi_heads(student, fm_s, rois_s[[a.roi_index for a in table.student_samples]]).embeddings
            k = roi_heads(student, fm_c, rois_c[[a.roi_index for a in table.contrastive_targets]]).embeddings
            labels = torch.as_tensor(table.pair_labels)
            embed = losses.pcl_embed(v, k, labels)
            pairs = losses.sample_aux_pairs(table.pair_labels, rng, cfg.aux_neg_per_pos)
            aux = losses.pcl_aux(v, k, pairs)

    try:
        parts = losses.total_loss(embed, aux, dc_rpn, dc_roi, cfg.gammas)
    except NumericDomainError as exc:
        raise DivergenceError(f"step {state.step}: {exc}") from exc

    lr = state.lr if state.lr is not None else cfg.lr
    if parts.total.requires_grad:
        grads = _gradients(parts.total, student)
    else:
        grads = {n: torch.zeros_like(p) for n, p in student.params.items()}
    grad_norm = clip_gradients(list(grads.values()), cfg.grad_clip_norm)
    new_student = sgd_update(state.student, grads, state.optimizer_state, lr, cfg.momentum, cfg.weight_decay)
    new_teacher = blend_weights(teacher, new_student, state.tau)
    new_teacher.step = new_student.step

    out = AdaptState(new_student, new_teacher, cfg, state.optimizer_state, state.step + 1, lr, grad_norm)
    record = LossBreakdown(
        *(float(x.detach()) if torch.is_tensor(x) else float(x) for x in (parts.embed, parts.aux, parts.dc_rpn, parts.dc_roi, parts.total)),
        weights=parts.weights,
        step=state.step,
    )
    return out, record


def _frame_index(videos: Sequence[Video]) -> list[tuple[int, int]]:
    return [(v, t) for v, video in enumerate(videos) for t in range(len(video))]


def _epoch_lr(cfg: AdaptConfig, epoch: int) -> float:
    return cfg.lr * cfg.lr_decay_factor ** sum(epoch >= e for e in cfg.lr_decay_epochs)


def adapt_run(
    source_weights: ModelWeights,
    target: Sequence[Video],
    cfg: AdaptConfig = AdaptConfig(),
    trace: Optional[list[LossBreakdown]] = None,
    on_step: Optional[Callable[[LossBreakdown], None]] = None,
) -> ModelWeights:
    """Adapt on shuffled unlabeled target frames for ``cfg.epochs``; returns the student."""
    for v in target:
        if not isinstance(v, Video):
            raise TypeError("adaptation consumes unlabeled Video objects only")
    state = AdaptState.start(source_weights, cfg)
    index = _frame_index(target)
    for epoch in range(cfg.epochs):
        state.lr = _epoch_lr(cfg, epoch)
        order = np.random.default_rng([cfg.seed, epoch, 31]).permutation(len(index))
        for i in order:
            v, t = index[int(i)]
            state, record = adapt_step(state, target[v].frames[t], (cfg.seed, epoch, v, t))
            if trace is not None:
                trace.append(record)
            if on_step is not None:
                on_step(record)
    return state.student


# ---------------------------------------------------------------- SFOD baseline


def sfod_baseline(
    source_weights: ModelWeights,
    target: Sequence[Video],
    conf_thr: float = 0.7,
    cfg: AdaptConfig = AdaptConfig(),
    trace: Optional[list[float]] = None,
) -> ModelWeights:
    """Self-train a student on the frozen source model's confident detections.

    The embedding head is left untouched; frames without pseudo-labels are skipped.
    """
    if not 0.0 <= conf_thr <= 1.0:
        raise ValueError("conf_thr must lie in [0, 1]")
    frozen = source_weights.clone()
    student = source_weights.clone()
    opt_state: dict[str, torch.Tensor] = {}
    index = _frame_index(target)
    for epoch in range(cfg.epochs):
        lr = _epoch_lr(cfg, epoch)
        order = np.random.default_rng([cfg.seed, epoch, 37]).permutation(len(index))
        for i in order:
            v, t = index[int(i)]
            seed = (cfg.seed, epoch, v, t)
            rng = view_rng(seed, "sample")
            frame = target[v].frames[t]
            warp = sample_geometric(view_rng(seed, "teacher"), cfg.aug, frame.shape[1], frame.shape[0]) \
                if cfg.aug.teacher_geometric else WarpRecord.identity(frame.shape[1], frame.shape[0])
            img = warp_image(frame, warp)
            with torch.no_grad():
                fm0 = encode(frozen, img)
                rpn0 = rpn_head(frozen, fm0)
                roi0 = roi_heads(frozen, fm0, propose(frozen, fm0, rpn0), with_embed=False)
                dets, _ = postprocess(frozen, fm0, roi0, cfg.detect.score_thr, cfg.detect.nms_iou)
            pseudo = filter_detections(dets, conf_thr)
            if not pseudo:
                continue
            live = student.clone(requires_grad=True)
            fm = encode(live, img)
            rpn = rpn_head(live, fm)
            gb = _boxes_tensor(pseudo, live.dtype)
            gl = torch.tensor([d.class_id for d in pseudo])
            total = rpn_loss(rpn, gb, rng) + roi_loss(live, fm, propose(live, fm, rpn), gb, gl, rng)
            if not math.isfinite(float(total.detach())):
                raise DivergenceError(f"non-finite SFOD loss at epoch {epoch}, frame {v}:{t}")
            grads = _gradients(total, live, frozen_prefixes=("embed.",))
            clip_gradients(list(grads.values()), cfg.grad_clip_norm)
            student = sgd_update(student, grads, opt_state, lr, cfg.momentum, cfg.weight_decay)
            if trace is not None:
                trace.append(float(total.detach()))
    return student
