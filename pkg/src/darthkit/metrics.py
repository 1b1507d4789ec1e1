"""CLEAR-MOT (MOTA), Identity (IDF1) and HOTA (DetA / AssA) tracking metrics.

Matching semantics follow the TrackEval reference implementation: IoU
similarity, 19 localisation thresholds for HOTA, a global alignment score
that biases per-frame HOTA matching, and per-frame match persistence for
CLEAR-MOT. Sequences are combined by summing counts; classes are combined
either by averaging class metrics or by pooling counts.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import iou_matrix
from .mot_io import TrackingResult

ALPHAS = np.arange(0.05, 0.99, 0.05)
EPS = np.finfo(float).eps
METRIC_ORDER = ("DetA", "MOTA", "HOTA", "IDF1", "AssA")


@dataclass
class _Frame:
    gt_ids: np.ndarray
    pr_ids: np.ndarray
    sim: np.ndarray  # [G, P] IoU


def _frames(gt: TrackingResult, pred: TrackingResult) -> list[_Frame]:
    g_by, p_by = gt.by_frame(), pred.by_frame()
    n = max(gt.frames(), pred.frames())
    out = []
    for f in range(1, n + 1):
        g = g_by.get(f, [])
        p = p_by.get(f, [])
        gb = np.array([r.box for r in g], dtype=np.float64).reshape(-1, 4)
        pb = np.array([r.box for r in p], dtype=np.float64).reshape(-1, 4)
        out.append(
            _Frame(
                np.array([r.track_id for r in g], dtype=np.int64),
                np.array([r.track_id for r in p], dtype=np.int64),
                iou_matrix(gb, pb),
            )
        )
    return out


def _dense(ids: Iterable[int]) -> dict[int, int]:
    return {v: i for i, v in enumerate(sorted(set(int(x) for x in ids)))}


@dataclass
class Counts:
    """Additive sufficient statistics for every metric."""

    num_gt: int = 0
    num_pred: int = 0
    clr_tp: int = 0
    clr_fn: int = 0
    clr_fp: int = 0
    idsw: int = 0
    idtp: int = 0
    idfn: int = 0
    idfp: int = 0
    hota_tp: np.ndarray = field(default_factory=lambda: np.zeros(len(ALPHAS)))
    hota_fn: np.ndarray = field(default_factory=lambda: np.zeros(len(ALPHAS)))
    hota_fp: np.ndarray = field(default_factory=lambda: np.zeros(len(ALPHAS)))
    ass_weighted: np.ndarray = field(default_factory=lambda: np.zeros(len(ALPHAS)))

    def __add__(self, other: "Counts") -> "Counts":
        return Counts(
            *(getattr(self, k) + getattr(other, k) for k in self.__dataclass_fields__)
        )

    @property
    def empty(self) -> bool:
        return self.num_gt == 0 and self.num_pred == 0


def clear_counts(gt: TrackingResult, pred: TrackingResult, iou_thr: float = 0.5) -> Counts:
    frames = _frames(gt, pred)
    c = Counts()
    prev_tracker: dict[int, int] = {}  # gt id -> last matched pred id (ever)
    prev_step: dict[int, int] = {}  # gt id -> pred id matched at the previous frame
    for fr in frames:
        g, p = len(fr.gt_ids), len(fr.pr_ids)
        c.num_gt += g
        c.num_pred += p
        if g == 0 or p == 0:
            c.clr_fn += g
            c.clr_fp += p
            prev_step = {}
            continue
        sim = fr.sim
        bonus = np.array(
            [[prev_step.get(int(gi)) == int(pi) for pi in fr.pr_ids] for gi in fr.gt_ids], dtype=float
        )
        score = 1000.0 * bonus + sim
        score[sim < iou_thr - EPS] = 0.0
        rows, cols = linear_sum_assignment(-score)
        ok = score[rows, cols] > 0.0
        rows, cols = rows[ok], cols[ok]
        step = {}
        for r, col in zip(rows, cols):
            gid, pid = int(fr.gt_ids[r]), int(fr.pr_ids[col])
            if gid in prev_tracker and prev_tracker[gid] != pid:
                c.idsw += 1
            prev_tracker[gid] = pid
            step[gid] = pid
        prev_step = step
        tp = len(rows)
        c.clr_tp += tp
        c.clr_fn += g - tp
        c.clr_fp += p - tp
    return c


def identity_counts(gt: TrackingResult, pred: TrackingResult, iou_thr: float = 0.5) -> Counts:
    frames = _frames(gt, pred)
    g_map = _dense(r.track_id for r in gt.rows)
    p_map = _dense(r.track_id for r in pred.rows)
    pmc = np.zeros((len(g_map), len(p_map)))
    for fr in frames:
        if fr.sim.size == 0:
            continue
        gi = [g_map[int(x)] for x in fr.gt_ids]
        pi = [p_map[int(x)] for x in fr.pr_ids]
        hit = fr.sim >= iou_thr - EPS
        np.add.at(pmc, (np.repeat(gi, len(pi)), np.tile(pi, len(gi))), hit.reshape(-1))
    idtp = 0
    if pmc.size:
        rows, cols = linear_sum_assignment(-pmc)
        idtp = int(round(pmc[rows, cols].sum()))
    c = Counts(num_gt=len(gt.rows), num_pred=len(pred.rows))
    c.idtp, c.idfn, c.idfp = idtp, len(gt.rows) - idtp, len(pred.rows) - idtp
    return c


def hota_counts(gt: TrackingResult, pred: TrackingResult) -> Counts:
    frames = _frames(gt, pred)
    g_map = _dense(r.track_id for r in gt.rows)
    p_map = _dense(r.track_id for r in pred.rows)
    G, P = len(g_map), len(p_map)
    c = Counts(num_gt=len(gt.rows), num_pred=len(pred.rows))
    if G == 0 or P == 0:
        c.hota_fn[:] = len(gt.rows)
        c.hota_fp[:] = len(pred.rows)
        return c
    pmc = np.zeros((G, P))
    gcount = np.zeros((G, 1))
    pcount = np.zeros((1, P))
    idx = []
    for fr in frames:
        gi = np.array([g_map[int(x)] for x in fr.gt_ids], dtype=int)
        pi = np.array([p_map[int(x)] for x in fr.pr_ids], dtype=int)
        idx.append((gi, pi))
        if len(gi) and len(pi):
            sim = fr.sim
            denom = sim.sum(0)[None, :] + sim.sum(1)[:, None] - sim
            sim_iou = np.zeros_like(sim)
            mask = denom > EPS
            sim_iou[mask] = sim[mask] / denom[mask]
            pmc[gi[:, None], pi[None, :]] += sim_iou
        gcount[gi] += 1
        pcount[0, pi] += 1
    global_align = pmc / (gcount + pcount - pmc)
    matches = np.zeros((len(ALPHAS), G, P))
    for fr, (gi, pi) in zip(frames, idx):
        if len(gi) == 0 or len(pi) == 0:
            c.hota_fn += len(gi)
            c.hota_fp += len(pi)
            continue
        score = global_align[gi[:, None], pi[None, :]] * fr.sim
        rows, cols = linear_sum_assignment(-score)
        for a, alpha in enumerate(ALPHAS):
            ok = fr.sim[rows, cols] >= alpha - EPS
            r, cc = rows[ok], cols[ok]
            n = len(r)
            c.hota_tp[a] += n
            c.hota_fn[a] += len(gi) - n
            c.hota_fp[a] += len(pi) - n
            if n:
                matches[a, gi[r], pi[cc]] += 1
    for a in range(len(ALPHAS)):
        m = matches[a]
        ass = m / np.maximum(1, gcount + pcount - m)
        c.ass_weighted[a] = (m * ass).sum()
    return c


def evaluate_counts(gt: TrackingResult, pred: TrackingResult, iou_thr: float = 0.5) -> Counts:
    a = clear_counts(gt, pred, iou_thr)
    b = identity_counts(gt, pred, iou_thr)
    h = hota_counts(gt, pred)
    a.idtp, a.idfn, a.idfp = b.idtp, b.idfn, b.idfp
    a.hota_tp, a.hota_fn, a.hota_fp, a.ass_weighted = h.hota_tp, h.hota_fn, h.hota_fp, h.ass_weighted
    return a


def metrics_from_counts(c: Counts) -> dict[str, float]:
    """Metric values in [0, 1] (MOTA in (-inf, 1]); MOTA is NaN when there is no ground truth."""
    det_a = c.hota_tp / np.maximum(1.0, c.hota_tp + c.hota_fn + c.hota_fp)
    ass_a = c.ass_weighted / np.maximum(1.0, c.hota_tp)
    hota_a = np.sqrt(det_a * ass_a)
    mota = 1.0 - (c.clr_fn + c.clr_fp + c.idsw) / c.num_gt if c.num_gt else float("nan")
    idf1 = 2 * c.idtp / max(1.0, 2 * c.idtp + c.idfp + c.idfn)
    return {
        "DetA": float(det_a.mean()),
        "MOTA": float(mota),
        "HOTA": float(hota_a.mean()),
        "IDF1": float(idf1),
        "AssA": float(ass_a.mean()),
    }


def clear_mot(gt: TrackingResult, pred: TrackingResult, iou_thr: float = 0.5) -> tuple[float, int, int, int]:
    """``(MOTA, IDSW, FP, FN)``; MOTA is NaN for empty ground truth."""
    c = clear_counts(gt, pred, iou_thr)
    mota = 1.0 - (c.clr_fn + c.clr_fp + c.idsw) / c.num_gt if c.num_gt else float("nan")
    return mota, c.idsw, c.clr_fp, c.clr_fn


def idf1(gt: TrackingResult, pred: TrackingResult, iou_thr: float = 0.5) -> float:
    c = identity_counts(gt, pred, iou_thr)
    if c.num_gt == 0 and c.num_pred == 0:
        return float("nan")
    return 2 * c.idtp / (2 * c.idtp + c.idfp + c.idfn)


def hota(gt: TrackingResult, pred: TrackingResult) -> tuple[float, float, float]:
    """``(HOTA, DetA, AssA)`` averaged over the 19 localisation thresholds."""
    m = metrics_from_counts(hota_counts(gt, pred))
    return m["HOTA"], m["DetA"], m["AssA"]


# ---------------------------------------------------------------- reports


@dataclass
class MetricsReport:
    classes: list[int]
    per_class: dict[int, dict[str, float]]
    per_sequence: dict[str, dict[int, dict[str, float]]]
    average: dict[str, float]
    overall: dict[str, float]
    counts: dict[int, Counts] = field(default_factory=dict, repr=False)
    mota_defined: bool = True

    def to_dict(self) -> dict:
        def scaled(m):
            return {k: _round(100.0 * m[k]) for k in METRIC_ORDER}

        def counts(c: Counts):
            return {"TP": c.clr_tp, "FP": c.clr_fp, "FN": c.clr_fn, "IDSW": c.idsw, "GT": c.num_gt}

        return {
            "classes": self.classes,
            "average": scaled(self.average),
            "overall": scaled(self.overall),
            "per_class": {str(k): {**scaled(v), **counts(self.counts[k])} for k, v in self.per_class.items()},
            "per_sequence": {
                s: {str(k): scaled(v) for k, v in d.items()} for s, d in self.per_sequence.items()
            },
            "mota_defined": self.mota_defined,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        def unscale(m):
            return {k: m[k] / 100.0 if m[k] is not None else float("nan") for k in METRIC_ORDER}

        return cls(
            classes=list(d["classes"]),
            per_class={int(k): unscale(v) for k, v in d["per_class"].items()},
            per_sequence={
                s: {int(k): unscale(v) for k, v in m.items()} for s, m in d["per_sequence"].items()
            },
            average=unscale(d["average"]),
            overall=unscale(d["overall"]),
            mota_defined=d.get("mota_defined", True),
        )


def _round(x: float) -> Optional[float]:
    if x is None or not math.isfinite(x):
        return None
    return round(float(x), 6)


def aggregate(counts: Sequence[Counts], mode: str = "average") -> dict[str, float]:
    """Combine per-class (or per-sequence) counts.

    ``average`` is the unweighted mean of each entry's metrics; ``overall``
    recomputes the metrics from pooled counts.
    """
    if not counts:
        raise ValueError("nothing to aggregate")
    if mode == "overall":
        total = counts[0]
        for c in counts[1:]:
            total = total + c
        return metrics_from_counts(total)
    if mode != "average":
        raise ValueError(f"unknown aggregation mode {mode!r}")
    per = [metrics_from_counts(c) for c in counts]
    return {k: float(np.mean([m[k] for m in per])) for k in METRIC_ORDER}


def evaluate(
    gt: Mapping[str, TrackingResult],
    pred: Mapping[str, TrackingResult],
    iou_thr: float = 0.5,
    classes: Optional[Sequence[int]] = None,
) -> MetricsReport:
    """Evaluate matched sequences class by class, then aggregate over classes."""
    if set(gt) != set(pred):
        raise KeyError(f"sequence mismatch: gt={sorted(gt)} pred={sorted(pred)}")
    if classes is None:
        found = set()
        for name in gt:
            found |= set(gt[name].classes())
        classes = sorted(found)
    per_class_counts: dict[int, Counts] = {}
    per_sequence: dict[str, dict[int, dict[str, float]]] = {}
    for name in sorted(gt):
        g_all = _drop_ignored(gt[name], pred[name])
        g_all, p_all = g_all
        per_sequence[name] = {}
        for cls in classes:
            c = evaluate_counts(g_all.for_class(cls), p_all.for_class(cls), iou_thr)
            per_class_counts[cls] = per_class_counts.get(cls, Counts()) + c
            if not c.empty:
                per_sequence[name][cls] = metrics_from_counts(c)
    valid = [k for k in classes if not per_class_counts[k].empty]
    if not valid:
        nan = {k: float("nan") for k in METRIC_ORDER}
        return MetricsReport(list(classes), {}, per_sequence, nan, nan, {}, False)
    per_class = {k: metrics_from_counts(per_class_counts[k]) for k in valid}
    kept = [per_class_counts[k] for k in valid]
    return MetricsReport(
        list(valid),
        per_class,
        per_sequence,
        aggregate(kept, "average"),
        aggregate(kept, "overall"),
        {k: per_class_counts[k] for k in valid},
        all(per_class_counts[k].num_gt > 0 for k in valid),
    )


def _drop_ignored(gt: TrackingResult, pred: TrackingResult, thr: float = 0.5) -> tuple[TrackingResult, TrackingResult]:
    """Remove gt rows flagged ignore (conf 0) and predictions that cover them."""
    ignored = [r for r in gt.rows if r.conf == 0]
    kept_gt = TrackingResult([r for r in gt.rows if r.conf != 0], gt.num_frames)
    if not ignored:
        return kept_gt, pred
    by_frame: dict[int, list] = {}
    for r in ignored:
        by_frame.setdefault(r.frame, []).append(r.box)
    rows = []
    for r in pred.rows:
        boxes = by_frame.get(r.frame)
        if boxes and iou_matrix(np.array([r.box]), np.array(boxes)).max() >= thr:
            continue
        rows.append(r)
    return kept_gt, TrackingResult(rows, pred.num_frames)
