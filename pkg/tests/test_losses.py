import math

import numpy as np
import pytest
import torch
from torch.autograd import gradcheck

from darthkit import losses
from darthkit.losses import (
    LossBreakdown,
    NumericDomainError,
    dc_roi,
    dc_rpn,
    pcl_aux,
    pcl_embed,
    pcl_embed_multi,
    sample_aux_pairs,
    total_loss,
)

D = torch.float64


def t(x):
    return torch.tensor(x, dtype=D)


def random_labels(rng, v, k, single=False):
    labels = np.zeros((v, k), dtype=bool)
    for i in range(v):
        if single:
            labels[i, rng.integers(k)] = True
        else:
            labels[i, rng.choice(k, size=rng.integers(1, k + 1), replace=False)] = True
    return torch.as_tensor(labels)


# ---------------------------------------------------------------- pcl_embed


def test_pcl_embed_single_positive_no_negatives():
    v, k = t([[1.0, 2.0]]), t([[0.5, -1.0]])
    assert float(pcl_embed(v, k, torch.tensor([[True]]))) == 0.0
    assert float(pcl_embed_multi(v, k, torch.tensor([[True]]))) == 0.0


def test_pcl_embed_scalar_case():
    # v.k+ = 1, v.k- = 0
    v = t([[1.0, 0.0]])
    k = t([[1.0, 0.0], [0.0, 1.0]])
    out = float(pcl_embed(v, k, torch.tensor([[True, False]])))
    assert out == pytest.approx(math.log(1 + math.exp(-1.0)), abs=1e-9)
    assert out == pytest.approx(0.313262, abs=1e-6)


def test_pcl_embed_matches_softmax_form_for_single_positive():
    rng = np.random.default_rng(0)
    for _ in range(100):
        V, K, E = rng.integers(1, 6), rng.integers(1, 9), rng.integers(2, 6)
        v, k = t(rng.normal(size=(V, E))), t(rng.normal(size=(K, E)))
        labels = random_labels(rng, V, K, single=True)
        a, b = float(pcl_embed(v, k, labels)), float(pcl_embed_multi(v, k, labels))
        assert abs(a - b) <= 1e-10


def test_pcl_embed_multi_monotone_in_negative_dot():
    v = t([[1.0, 0.0]])
    k = t([[1.0, 0.0], [0.2, 0.0]])
    lab = torch.tensor([[True, False]])
    base = float(pcl_embed_multi(v, k, lab))
    k2 = k.clone()
    k2[1, 0] = 0.6
    assert float(pcl_embed_multi(v, k2, lab)) > base


def test_pcl_embed_large_dots_stable_and_nonnegative():
    v = t([[500.0]])
    k = t([[1.0], [-1.0], [0.999]])
    lab = torch.tensor([[True, False, False]])
    out = float(pcl_embed(v, k, lab))
    assert math.isfinite(out) and out >= 0
    # negatives dominating by 500 units
    out2 = float(pcl_embed(v, t([[-1.0], [1.0]]), torch.tensor([[True, False]])))
    assert out2 == pytest.approx(1000.0, rel=1e-12)


def test_pcl_embed_margin_limit():
    v = t([[1.0]])
    k = t([[15.0], [-15.0]])
    assert float(pcl_embed(v, k, torch.tensor([[True, False]]))) < 1e-12


def test_pcl_embed_requires_a_positive_per_anchor():
    with pytest.raises(ValueError):
        pcl_embed(t([[1.0]]), t([[1.0]]), torch.tensor([[False]]))


# ---------------------------------------------------------------- pcl_aux


def test_pcl_aux_cases():
    e = t([[1.0, 0.0]])
    o = t([[0.0, 1.0]])
    assert float(pcl_aux(e, e, [(0, 0, True)])) == 0.0
    assert float(pcl_aux(e, o, [(0, 0, False)])) == 0.0
    assert float(pcl_aux(e, e, [(0, 0, False)])) == 1.0


def test_pcl_aux_zero_norm_raises():
    with pytest.raises(NumericDomainError):
        pcl_aux(t([[0.0, 0.0]]), t([[1.0, 0.0]]), [(0, 0, True)])


def test_sample_aux_pairs_ratio():
    rng = np.random.default_rng(0)
    labels = np.zeros((4, 10), dtype=bool)
    labels[0, 0] = labels[1, 1] = True
    pairs = sample_aux_pairs(labels, rng)
    pos = [p for p in pairs if p[2]]
    neg = [p for p in pairs if not p[2]]
    assert len(pos) == 2 and len(neg) == 6
    assert len(set(neg)) == len(neg)
    assert all(not labels[i, j] for i, j, _ in neg)
    # capped by availability
    dense = np.ones((2, 2), dtype=bool)
    dense[0, 1] = False
    assert len([p for p in sample_aux_pairs(dense, rng) if not p[2]]) == 1


# ---------------------------------------------------------------- dc_rpn


def test_dc_rpn_identical_is_zero():
    s, r = t([0.3, -1.0]), t(np.ones((2, 4)))
    assert float(dc_rpn(s, r, s.clone(), r.clone())) == 0.0


def test_dc_rpn_worked_example():
    out = dc_rpn(t([1.0]), t([[0.5, 0, 0, 0]]), t([0.0]), t([[0.0, 0, 0, 0]]), 0.1)
    assert float(out) == pytest.approx(1.25, abs=1e-9)


def test_dc_rpn_gate_closed():
    out = dc_rpn(t([0.0]), t([[5.0, 1, 2, 3]]), t([0.05]), t([[0.0, 0, 0, 0]]), 0.1)
    assert float(out) == pytest.approx(0.0025, abs=1e-15)


def test_dc_rpn_empty():
    z = torch.zeros(0, dtype=D)
    assert float(dc_rpn(z, z.reshape(0, 4), z, z.reshape(0, 4))) == 0.0


def test_dc_rpn_non_increasing_in_epsilon():
    rng = np.random.default_rng(1)
    for _ in range(20):
        st, ss = t(rng.normal(size=30)), t(rng.normal(size=30))
        rt, rs = t(rng.normal(size=(30, 4))), t(rng.normal(size=(30, 4)))
        vals = [float(dc_rpn(st, rt, ss, rs, e)) for e in np.linspace(-1, 2, 13)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))


# ---------------------------------------------------------------- dc_roi


def test_dc_roi_cases():
    p, tt = t([[2.0, 2.0, 2.0]]), t([[0.1, 0.2, 0.3, 0.4]])
    assert float(dc_roi(p, tt, p.clone(), tt.clone())) == 0.0
    assert float(dc_roi(p, tt, t([[5.0, 5.0, 5.0]]), tt.clone())) == 0.0
    # zero-mean difference (1, -1), K=1, C=2
    out = dc_roi(t([[1.0, -1.0]]), t([[0.0] * 4]), t([[0.0, 0.0]]), t([[0.0] * 4]))
    assert float(out) == pytest.approx(1.0, abs=1e-15)


def test_dc_roi_shift_invariance():
    rng = np.random.default_rng(2)
    for _ in range(50):
        K, C = rng.integers(1, 8), rng.integers(2, 6)
        pt, ps = t(rng.normal(size=(K, C))), t(rng.normal(size=(K, C)))
        tt, ts = t(rng.normal(size=(K, 4))), t(rng.normal(size=(K, 4)))
        base = float(dc_roi(pt, tt, ps, ts))
        shift_t = t(rng.normal(size=(K, 1)) * 10)
        shift_s = t(rng.normal(size=(K, 1)) * 10)
        assert abs(float(dc_roi(pt + shift_t, tt, ps + shift_s, ts)) - base) <= 1e-10


# ---------------------------------------------------------------- gradients


def _instance(rng):
    V, K, E = rng.integers(1, 5), rng.integers(2, 8), rng.integers(2, 6)
    v = t(rng.normal(size=(V, E))).requires_grad_()
    k = t(rng.normal(size=(K, E))).requires_grad_()
    return v, k, random_labels(rng, V, K)


def test_gradients_pcl_embed():
    rng = np.random.default_rng(10)
    for _ in range(20):
        v, k, labels = _instance(rng)
        assert gradcheck(lambda a, b: pcl_embed(a, b, labels), (v, k), eps=1e-6, atol=1e-8, rtol=1e-4)


def test_gradients_pcl_aux():
    rng = np.random.default_rng(11)
    for _ in range(20):
        v, k, labels = _instance(rng)
        pairs = sample_aux_pairs(labels.numpy(), rng)
        assert gradcheck(lambda a, b: pcl_aux(a, b, pairs), (v, k), eps=1e-6, atol=1e-8, rtol=1e-4)


def test_gradients_dc_losses_student_side_and_teacher_zero():
    rng = np.random.default_rng(12)
    for _ in range(20):
        n, K, C = rng.integers(1, 20), rng.integers(1, 6), rng.integers(2, 5)
        st, rt = t(rng.normal(size=n)), t(rng.normal(size=(n, 4)))
        # keep logits away from the gate boundary so finite differences do not cross it
        ss = st - t(rng.choice([-1.0, 1.0], size=n)) * t(rng.uniform(0.3, 1.0, size=n))
        ss.requires_grad_()
        rs = t(rng.normal(size=(n, 4))).requires_grad_()
        assert gradcheck(lambda a, b: dc_rpn(st, rt, a, b, 0.1), (ss, rs), eps=1e-6, atol=1e-8, rtol=1e-4)
        pt, tt = t(rng.normal(size=(K, C))), t(rng.normal(size=(K, 4)))
        ps = t(rng.normal(size=(K, C))).requires_grad_()
        ts = t(rng.normal(size=(K, 4))).requires_grad_()
        assert gradcheck(lambda a, b: dc_roi(pt, tt, a, b), (ps, ts), eps=1e-6, atol=1e-8, rtol=1e-4)

        st2, rt2 = st.clone().requires_grad_(), rt.clone().requires_grad_()
        g = torch.autograd.grad(dc_rpn(st2, rt2, ss, rs), (st2, rt2), allow_unused=True)
        assert all(x is None for x in g)
        pt2, tt2 = pt.clone().requires_grad_(), tt.clone().requires_grad_()
        g = torch.autograd.grad(dc_roi(pt2, tt2, ps, ts), (pt2, tt2), allow_unused=True)
        assert all(x is None for x in g)


# ---------------------------------------------------------------- total


def test_total_loss_values():
    assert float(total_loss().total) == 0.0
    assert total_loss(1.0, 1.0, 1.0, 1.0).total == 3.25
    iso = total_loss(2.0, 3.0, 5.0, 7.0, gammas=(0, 0, 1, 0))
    assert iso.total == 5.0


def test_total_loss_exact_weighted_sum():
    rng = np.random.default_rng(3)
    for _ in range(50):
        p = rng.uniform(0, 10, 4)
        g = rng.uniform(0, 2, 4)
        b = total_loss(*p, gammas=g)
        assert b.total == g[0] * p[0] + g[1] * p[1] + g[2] * p[2] + g[3] * p[3]


def test_total_loss_non_finite_names_component():
    with pytest.raises(NumericDomainError, match="dc_roi"):
        total_loss(1.0, 1.0, 1.0, float("nan"))


def test_loss_breakdown_json_line():
    b = total_loss(t(1.0), 0.0, 0.5, 0.25)
    b.step = 7
    line = b.to_json()
    assert "\n" not in line and '"step": 7' in line and '"total": 1.0' in line
