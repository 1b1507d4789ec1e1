"""Quasi-dense self-matching between student-view and contrastive-view RoIs.

Teacher detections are warped into both views; every RoI is tied to the
detection it overlaps most. Two RoIs from different views form a positive
pair when both are positives of the same teacher detection.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import BoundingBox, Detection, boxes_to_array, iou_matrix

NEG_IOU_BINS = (0.0, 0.1, 0.2, 0.3)


class View(str, enum.Enum):
    STUDENT = "student"
    CONTRASTIVE = "contrastive"


class Polarity(str, enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    IGNORE = "ignore"


@dataclass(frozen=True)
class AssignedRoI:
    box: BoundingBox
    view: View
    assigned_det: Optional[int]
    polarity: Polarity
    max_iou: float = 0.0
    # Position of the RoI in the list handed to assign_rois.
    roi_index: int = -1


@dataclass
class MatchTable:
    student_samples: list[AssignedRoI]
    contrastive_targets: list[AssignedRoI]
    pair_labels: np.ndarray  # [V, K] bool

    @property
    def empty(self) -> bool:
        return len(self.student_samples) == 0

    @classmethod
    def make_empty(cls) -> "MatchTable":
        return cls([], [], np.zeros((0, 0), dtype=bool))


def filter_detections(dets: Sequence[Detection], gamma: float) -> list[Detection]:
    """Keep detections with confidence at least ``gamma``, in input order."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma={gamma} outside [0, 1]")
    return [d for d in dets if d.confidence >= gamma]


def assign_rois(
    rois: Sequence[BoundingBox],
    dets: Sequence[BoundingBox],
    a1: float = 0.7,
    a2: float = 0.3,
    view: View = View.STUDENT,
) -> list[AssignedRoI]:
    if a2 > a1:
        raise ValueError("need a2 <= a1")
    view = View(view)
    if not dets:
        return [AssignedRoI(r, view, None, Polarity.NEGATIVE, 0.0, i) for i, r in enumerate(rois)]
    ious = iou_matrix(boxes_to_array(rois), boxes_to_array(dets))
    # argmax returns the first maximum, i.e. the lowest detection index on ties.
    best = ious.argmax(axis=1) if len(rois) else np.zeros(0, dtype=int)
    out = []
    for i, roi in enumerate(rois):
        j = int(best[i])
        m = float(ious[i, j])
        if m >= a1:
            out.append(AssignedRoI(roi, view, j, Polarity.POSITIVE, m, i))
        elif m < a2:
            out.append(AssignedRoI(roi, view, j, Polarity.NEGATIVE, m, i))
        else:
            out.append(AssignedRoI(roi, view, j, Polarity.IGNORE, m, i))
    return out


def pair_rule(a: AssignedRoI, b: AssignedRoI) -> bool:
    return (
        a.polarity is Polarity.POSITIVE
        and b.polarity is Polarity.POSITIVE
        and a.assigned_det == b.assigned_det
    )


def build_match_table(
    student: Sequence[AssignedRoI], contrastive: Sequence[AssignedRoI]
) -> MatchTable:
    targets = [c for c in contrastive if c.polarity is not Polarity.IGNORE]
    target_dets = np.array(
        [c.assigned_det if c.polarity is Polarity.POSITIVE else -1 for c in targets], dtype=int
    )
    samples, rows = [], []
    for s in student:
        if s.polarity is not Polarity.POSITIVE:
            continue
        row = target_dets == s.assigned_det
        if row.any():
            samples.append(s)
            rows.append(row)
    if not samples:
        return MatchTable.make_empty()
    return MatchTable(samples, targets, np.stack(rows))


def _balanced_negatives(
    negs: list[AssignedRoI], n: int, rng: np.random.Generator
) -> list[AssignedRoI]:
    """Draw ``n`` negatives with an equal quota per nonempty IoU bin."""
    if n >= len(negs):
        return list(negs)
    edges = NEG_IOU_BINS
    bins = [
        [r for r in negs if edges[b] <= r.max_iou < edges[b + 1]] for b in range(len(edges) - 1)
    ]
    # Anything that slipped outside the bins (a2 > 0.3) lands in the last one.
    stray = [r for r in negs if r.max_iou >= edges[-1]]
    bins[-1].extend(stray)
    bins = [b for b in bins if b]
    quota = n // len(bins)
    picked: list[AssignedRoI] = []
    leftovers: list[AssignedRoI] = []
    for b in bins:
        order = rng.permutation(len(b))
        take = min(quota, len(b))
        picked.extend(b[i] for i in order[:take])
        leftovers.extend(b[i] for i in order[take:])
    remaining = n - len(picked)
    if remaining > 0:
        order = rng.permutation(len(leftovers))[:remaining]
        picked.extend(leftovers[i] for i in order)
    return picked


def sample_rois(
    assigned: Sequence[AssignedRoI],
    n: int,
    pos_ratio: float,
    rng: np.random.Generator,
) -> list[AssignedRoI]:
    """Sample up to ``n`` RoIs at a positive:negative ratio of ``pos_ratio``.

    Negatives are IoU-balanced. When one side runs short the other fills the
    gap, except that an infinite ratio means positives only. Ignored RoIs are
    never sampled. Output keeps the input order.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    pos = [a for a in assigned if a.polarity is Polarity.POSITIVE]
    neg = [a for a in assigned if a.polarity is Polarity.NEGATIVE]
    if np.isinf(pos_ratio):
        want_pos = n
    else:
        want_pos = int(round(n * pos_ratio / (1.0 + pos_ratio)))
    n_pos = min(len(pos), want_pos)
    if np.isinf(pos_ratio):
        n_neg = 0
    else:
        n_neg = min(len(neg), n - n_pos)
        n_pos = min(len(pos), n - n_neg)
    chosen_pos = [pos[i] for i in rng.permutation(len(pos))[:n_pos]]
    chosen_neg = _balanced_negatives(neg, n_neg, rng)
    order = {id(a): i for i, a in enumerate(assigned)}
    return sorted(chosen_pos + chosen_neg, key=lambda a: order[id(a)])
