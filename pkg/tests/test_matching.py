import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from darthkit.geometry import BoundingBox, iou
from darthkit.matching import (
    AssignedRoI,
    Polarity,
    View,
    assign_rois,
    build_match_table,
    filter_detections,
    pair_rule,
    sample_rois,
)


def b(x1, y1, x2, y2, conf=1.0):
    return BoundingBox(x1, y1, x2, y2, confidence=conf)


def random_boxes(rng, n, size=60):
    xy = rng.uniform(0, size, (n, 2))
    wh = rng.uniform(8, 25, (n, 2))
    return [b(*p, *(p + q)) for p, q in zip(xy, wh)]


def jitter(rng, boxes, n):
    out = []
    for _ in range(n):
        d = boxes[rng.integers(len(boxes))]
        s = rng.uniform(-1.5, 1.5, 4)
        x1, y1 = d.x1 + s[0], d.y1 + s[1]
        out.append(b(x1, y1, max(x1 + 1, d.x2 + s[2]), max(y1 + 1, d.y2 + s[3])))
    return out


def test_filter_detections_examples():
    dets = [b(0, 0, 1, 1, 0.9), b(0, 0, 1, 1, 0.5)]
    assert filter_detections(dets, 0.7) == dets[:1]
    assert filter_detections(dets, 0.0) == dets
    assert filter_detections(dets, 1.0) == []


def test_filter_prefix_closed_under_sorting():
    rng = np.random.default_rng(0)
    for _ in range(50):
        dets = sorted(
            [b(0, 0, 1, 1, float(c)) for c in rng.uniform(0, 1, 8)], key=lambda d: -d.confidence
        )
        kept = filter_detections(dets, float(rng.uniform()))
        assert kept == dets[: len(kept)]


def test_assign_examples():
    det = [b(0, 0, 10, 10)]
    same, far, half = b(0, 0, 10, 10), b(50, 50, 60, 60), b(0, 0, 10, 5)
    out = assign_rois([same, far, half], det)
    assert out[0].polarity is Polarity.POSITIVE and out[0].assigned_det == 0
    assert out[1].polarity is Polarity.NEGATIVE
    assert out[2].polarity is Polarity.IGNORE and out[2].max_iou == pytest.approx(0.5)


def test_assign_tie_goes_to_lowest_index():
    dets = [b(0, 0, 10, 10), b(0, 0, 10, 10)]
    assert assign_rois([b(0, 0, 10, 10)], dets)[0].assigned_det == 0


def test_assign_without_detections_all_negative():
    out = assign_rois(random_boxes(np.random.default_rng(0), 5), [])
    assert all(a.polarity is Polarity.NEGATIVE for a in out)


def test_assign_permutation_invariant():
    rng = np.random.default_rng(1)
    for _ in range(30):
        dets = random_boxes(rng, 4)
        rois = jitter(rng, dets, 10) + random_boxes(rng, 5)
        perm = rng.permutation(len(rois))
        a = assign_rois(rois, dets)
        p = assign_rois([rois[i] for i in perm], dets)
        for k, i in enumerate(perm):
            assert (p[k].assigned_det, p[k].polarity) == (a[i].assigned_det, a[i].polarity)


def test_table_small_examples():
    det = [b(0, 0, 10, 10), b(30, 30, 40, 40)]
    s = assign_rois([b(0, 0, 10, 10)], det[:1], view=View.STUDENT)
    c = assign_rois([b(0, 0, 10, 10)], det[:1], view=View.CONTRASTIVE)
    assert build_match_table(s, c).pair_labels.tolist() == [[True]]
    s = assign_rois([b(0, 0, 10, 10), b(30, 30, 40, 40)], det, view=View.STUDENT)
    c = assign_rois([b(30, 30, 40, 40), b(0, 0, 10, 10)], det, view=View.CONTRASTIVE)
    assert build_match_table(s, c).pair_labels.tolist() == [[False, True], [True, False]]


def test_table_drops_students_without_targets():
    det = [b(0, 0, 10, 10), b(30, 30, 40, 40)]
    s = assign_rois([b(0, 0, 10, 10), b(30, 30, 40, 40)], det, view=View.STUDENT)
    c = assign_rois([b(0, 0, 10, 10)], det, view=View.CONTRASTIVE)
    t = build_match_table(s, c)
    assert len(t.student_samples) == 1 and t.pair_labels.shape == (1, 1)


def brute_force_table(student, contrastive):
    """Definitional oracle: every student positive with a positive partner, every non-ignored target."""
    targets = [c for c in contrastive if c.polarity is not Polarity.IGNORE]
    rows = []
    for s in student:
        if s.polarity is not Polarity.POSITIVE:
            continue
        row = [
            s.polarity is Polarity.POSITIVE
            and c.polarity is Polarity.POSITIVE
            and s.assigned_det == c.assigned_det
            for c in targets
        ]
        if any(row):
            rows.append((s, row))
    return [s for s, _ in rows], targets, [r for _, r in rows]


def test_table_matches_bruteforce_oracle():
    rng = np.random.default_rng(7)
    nonempty = 0
    for _ in range(150):
        dets = random_boxes(rng, int(rng.integers(0, 6)))
        n_s, n_c = int(rng.integers(0, 21)), int(rng.integers(0, 21))
        rois_s = (jitter(rng, dets, n_s // 2) if dets else []) + random_boxes(rng, n_s - (n_s // 2 if dets else 0))
        rois_c = (jitter(rng, dets, n_c // 2) if dets else []) + random_boxes(rng, n_c - (n_c // 2 if dets else 0))
        s = assign_rois(rois_s, dets, view=View.STUDENT)
        c = assign_rois(rois_c, dets, view=View.CONTRASTIVE)
        # polarity against brute-force IoU
        for a, roi in zip(s, rois_s):
            m = max((iou(roi, d) for d in dets), default=0.0)
            assert abs(a.max_iou - m) < 1e-12
        table = build_match_table(s, c)
        samples, targets, rows = brute_force_table(s, c)
        assert table.student_samples == samples
        if samples:
            nonempty += 1
            assert table.contrastive_targets == targets
            assert table.pair_labels.tolist() == rows
            for i, si in enumerate(table.student_samples):
                for j, cj in enumerate(table.contrastive_targets):
                    assert table.pair_labels[i, j] == pair_rule(si, cj)
        else:
            assert table.empty
    assert nonempty >= 50


def _roi(pol, m=0.0, det=0):
    return AssignedRoI(b(0, 0, 1, 1), View.STUDENT, det, pol, m)


def test_sample_all_positive():
    rng = np.random.default_rng(0)
    out = sample_rois([_roi(Polarity.POSITIVE, 0.9) for _ in range(10)], 4, 1.0, rng)
    assert len(out) == 4 and all(a.polarity is Polarity.POSITIVE for a in out)


def test_sample_exact_balance():
    rng = np.random.default_rng(0)
    items = [_roi(Polarity.POSITIVE, 0.9) for _ in range(10)] + [
        _roi(Polarity.NEGATIVE, float(m)) for m in rng.uniform(0, 0.3, 10)
    ]
    out = sample_rois(items, 8, 1.0, rng)
    assert sum(a.polarity is Polarity.POSITIVE for a in out) == 4
    assert sum(a.polarity is Polarity.NEGATIVE for a in out) == 4


def test_sample_single_bin_fills_quota():
    rng = np.random.default_rng(0)
    items = [_roi(Polarity.NEGATIVE, 0.05) for _ in range(20)]
    assert len(sample_rois(items, 8, 1.0, rng)) == 8


def test_sample_balanced_across_bins():
    rng = np.random.default_rng(0)
    items = [_roi(Polarity.NEGATIVE, m) for m in [0.05] * 20 + [0.15] * 20 + [0.25] * 20]
    out = sample_rois(items, 9, 0.0, rng)
    counts = np.histogram([a.max_iou for a in out], bins=[0, 0.1, 0.2, 0.3])[0]
    assert counts.tolist() == [3, 3, 3]


@settings(max_examples=200, deadline=None)
@given(
    st.integers(0, 15), st.integers(0, 15), st.integers(0, 5), st.integers(1, 20),
    st.sampled_from([0.25, 1.0, 3.0, float("inf")]), st.integers(0, 10**6),
)
def test_sample_invariants(n_pos, n_neg, n_ign, n, ratio, seed):
    rng = np.random.default_rng(seed)
    items = (
        [_roi(Polarity.POSITIVE, 0.8) for _ in range(n_pos)]
        + [_roi(Polarity.NEGATIVE, float(m)) for m in rng.uniform(0, 0.3, n_neg)]
        + [_roi(Polarity.IGNORE, 0.5) for _ in range(n_ign)]
    )
    out = sample_rois(items, n, ratio, rng)
    pos = sum(a.polarity is Polarity.POSITIVE for a in out)
    assert len(out) <= n
    assert all(a.polarity is not Polarity.IGNORE for a in out)
    assert len({id(a) for a in out}) == len(out)
    if ratio == float("inf"):
        assert pos == len(out) == min(n, n_pos)
    else:
        assert len(out) == min(n, n_pos + n_neg)
