"""Finite-difference gradient checks shared by the unit and acceptance suites."""
import numpy as np
import torch
from torch.autograd import gradcheck

from darthkit.losses import dc_roi, dc_rpn, pcl_aux, pcl_embed, sample_aux_pairs
from darthkit.model import ModelConfig, ModelWeights, forward, init_weights

D = torch.float64
TINY = ModelConfig(
    encoder_channels=(4, 4, 4), rpn_channels=4, pool_size=2, roi_hidden=8, embed_hidden=8, embed_dim=4,
)
# Narrower still, so the per-coordinate composed check fits the acceptance time budget.
MICRO = ModelConfig(
    encoder_channels=(2, 2, 2), rpn_channels=2, pool_size=2, roi_hidden=4, embed_hidden=4, embed_dim=3,
)
CHECK = dict(eps=1e-6, atol=1e-8, rtol=1e-4, nondet_tol=0.0)


def _labels(rng, v, k):
    lab = np.zeros((v, k), dtype=bool)
    for i in range(v):
        lab[i, rng.choice(k, size=rng.integers(1, k + 1), replace=False)] = True
    return lab


def loss_instances(kind: str, n: int, seed: int):
    """Yield ``(fn, inputs)`` pairs for one of the four losses."""
    rng = np.random.default_rng(seed)
    for _ in range(n):
        if kind in ("pcl_embed", "pcl_aux"):
            V, K, E = int(rng.integers(1, 5)), int(rng.integers(2, 8)), int(rng.integers(2, 6))
            v = torch.tensor(rng.normal(size=(V, E)), dtype=D, requires_grad=True)
            k = torch.tensor(rng.normal(size=(K, E)), dtype=D, requires_grad=True)
            lab = _labels(rng, V, K)
            if kind == "pcl_embed":
                yield (lambda a, b, lab=torch.as_tensor(lab): pcl_embed(a, b, lab)), (v, k)
            else:
                pairs = sample_aux_pairs(lab, rng)
                yield (lambda a, b, pairs=pairs: pcl_aux(a, b, pairs)), (v, k)
        elif kind == "dc_rpn":
            m = int(rng.integers(1, 20))
            st = torch.tensor(rng.normal(size=m), dtype=D)
            rt = torch.tensor(rng.normal(size=(m, 4)), dtype=D)
            # stay clear of the gate boundary so differences do not flip it
            gap = rng.choice([-1.0, 1.0], size=m) * rng.uniform(0.3, 1.0, size=m)
            ss = (st - torch.tensor(gap, dtype=D)).requires_grad_()
            rs = torch.tensor(rng.normal(size=(m, 4)), dtype=D, requires_grad=True)
            yield (lambda a, b, st=st, rt=rt: dc_rpn(st, rt, a, b, 0.1)), (ss, rs)
        elif kind == "dc_roi":
            K, C = int(rng.integers(1, 6)), int(rng.integers(2, 5))
            pt = torch.tensor(rng.normal(size=(K, C)), dtype=D)
            tt = torch.tensor(rng.normal(size=(K, 4)), dtype=D)
            ps = torch.tensor(rng.normal(size=(K, C)), dtype=D, requires_grad=True)
            ts = torch.tensor(rng.normal(size=(K, 4)), dtype=D, requires_grad=True)
            yield (lambda a, b, pt=pt, tt=tt: dc_roi(pt, tt, a, b)), (ps, ts)
        else:
            raise ValueError(kind)


def composed_instances(n: int, seed: int, cfg: ModelConfig = TINY):
    """Total DARTH objective through the toy model, as a function of the student parameters."""
    rng = np.random.default_rng(seed)
    for i in range(n):
        student = init_weights(cfg, seed=1000 + i, dtype=D)
        teacher = init_weights(cfg, seed=2000 + i, dtype=D)
        img_s = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
        img_c = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
        def boxes(k):
            xy = rng.uniform(0, 8, (k, 2))
            return np.hstack([xy, xy + rng.uniform(3, 8, (k, 2))])
        rois_s, rois_c = boxes(3), boxes(4)
        with torch.no_grad():
            t_out = forward(teacher, img_s, rois_s)
        lab = _labels(rng, 3, 4)
        pairs = sample_aux_pairs(lab, rng)
        names = student.names()

        def fn(*params, names=names, img_s=img_s, img_c=img_c, rois_s=rois_s, rois_c=rois_c,
               t_out=t_out, lab=torch.as_tensor(lab), pairs=pairs, cfg=cfg):
            w = ModelWeights(dict(zip(names, params)), cfg)
            s = forward(w, img_s, rois_s)
            c = forward(w, img_c, rois_c)
            return (
                0.25 * pcl_embed(s.embeddings, c.embeddings, lab)
                + pcl_aux(s.embeddings, c.embeddings, pairs)
                + dc_rpn(t_out.rpn_cls, t_out.rpn_reg, s.rpn_cls, s.rpn_reg)
                + dc_roi(t_out.roi_cls, t_out.roi_reg, s.roi_cls, s.roi_reg)
            )

        # zero-initialised biases put ReLUs exactly on their kink; jitter to a generic point
        params = tuple(
            (student[k] + torch.tensor(rng.normal(0.0, 0.05, size=tuple(student[k].shape)), dtype=D)).requires_grad_()
            for k in names
        )
        yield fn, params


def check(fn, inputs) -> bool:
    return gradcheck(fn, inputs, **CHECK)
