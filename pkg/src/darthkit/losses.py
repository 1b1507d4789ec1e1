"""Patch-contrastive and detection-consistency objectives.

All losses take torch tensors and return a scalar tensor. Teacher-side
inputs are detached inside each function, so gradients only reach the
student.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
import torch

DEFAULT_GAMMAS = (0.25, 1.0, 1.0, 1.0)
COMPONENTS = ("embed", "aux", "dc_rpn", "dc_roi")

Number = Union[float, torch.Tensor]


class NumericDomainError(ArithmeticError):
    """A loss input left the domain where the loss is defined (zero norms, NaNs)."""


def _zero(like: torch.Tensor) -> torch.Tensor:
    # Keeps the graph connected so callers can always backward().
    return like.sum() * 0.0


def _check_anchors(labels: torch.Tensor) -> None:
    if labels.numel() and not bool(labels.any(dim=1).all()):
        raise ValueError("every anchor row needs at least one positive target")


def pcl_embed(v: torch.Tensor, k: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Multi-positive contrastive loss, averaged over anchors.

    For each anchor ``v`` the loss is ``log(1 + sum_{k+} sum_{k-} exp(v.k- - v.k+))``
    on raw dot products, evaluated as a logsumexp with an extra zero entry.
    """
    labels = torch.as_tensor(labels, dtype=torch.bool, device=v.device)
    if v.shape[0] == 0:
        return _zero(v) + _zero(k)
    _check_anchors(labels)
    dots = v @ k.T  # [V, K]
    # diff[i, p, n] = dots[i, n] - dots[i, p]
    diff = dots[:, None, :] - dots[:, :, None]
    valid = labels[:, :, None] & ~labels[:, None, :]
    diff = diff.masked_fill(~valid, float("-inf")).flatten(1)
    diff = torch.cat([diff, torch.zeros_like(diff[:, :1])], dim=1)
    return torch.logsumexp(diff, dim=1).mean()


def pcl_embed_multi(v: torch.Tensor, k: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Reference non-parametric softmax cross-entropy (one term per positive); test oracle."""
    labels = torch.as_tensor(labels, dtype=torch.bool, device=v.device)
    if v.shape[0] == 0:
        return _zero(v) + _zero(k)
    _check_anchors(labels)
    dots = v @ k.T
    per_anchor = []
    for i in range(dots.shape[0]):
        pos = dots[i][labels[i]]
        neg = dots[i][~labels[i]]
        total = dots.new_zeros(())
        for d in pos:
            logits = torch.cat([d.reshape(1), neg])
            total = total + torch.logsumexp(logits, dim=0) - d
        per_anchor.append(total)
    return torch.stack(per_anchor).mean()


def sample_aux_pairs(
    labels: np.ndarray, rng: np.random.Generator, neg_per_pos: int = 3
) -> list[tuple[int, int, bool]]:
    """All positive (anchor, target) pairs plus ``neg_per_pos`` times as many negatives."""
    labels = np.asarray(labels, dtype=bool)
    pos = [(int(i), int(j), True) for i, j in zip(*np.nonzero(labels))]
    neg_idx = np.argwhere(~labels)
    n_neg = min(len(neg_idx), neg_per_pos * len(pos))
    chosen = rng.choice(len(neg_idx), size=n_neg, replace=False) if n_neg else []
    neg = [(int(neg_idx[c][0]), int(neg_idx[c][1]), False) for c in np.sort(chosen)]
    return pos + neg


def pcl_aux(
    v: torch.Tensor, k: torch.Tensor, pairs: Sequence[tuple[int, int, bool]]
) -> torch.Tensor:
    """Mean squared gap between pair cosine similarity and the 0/1 match label."""
    if len(pairs) == 0:
        return _zero(v) + _zero(k)
    ii = torch.tensor([p[0] for p in pairs], device=v.device)
    jj = torch.tensor([p[1] for p in pairs], device=v.device)
    target = torch.tensor([float(p[2]) for p in pairs], dtype=v.dtype, device=v.device)
    a, b = v[ii], k[jj]
    na, nb = a.norm(dim=1), b.norm(dim=1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise NumericDomainError("zero-norm embedding in auxiliary loss pairs")
    cos = (a * b).sum(dim=1) / (na * nb)
    return ((cos - target) ** 2).mean()


def dc_rpn(
    s_t: torch.Tensor,
    r_t: torch.Tensor,
    s_s: torch.Tensor,
    r_s: torch.Tensor,
    epsilon: float = 0.1,
) -> torch.Tensor:
    """RPN consistency: squared logit gap plus regression gap where the teacher is more confident."""
    if s_s.shape != s_t.shape or r_s.shape != r_t.shape:
        raise ValueError("teacher and student RPN outputs differ in shape")
    if s_s.numel() == 0:
        return _zero(s_s) + _zero(r_s)
    s_t, r_t = s_t.detach(), r_t.detach()
    gate = (s_t > s_s.detach() + epsilon).to(s_s.dtype)
    per_anchor = (s_t - s_s) ** 2 + gate * ((r_t - r_s) ** 2).sum(dim=-1)
    return per_anchor.mean()


def dc_roi(
    p_t: torch.Tensor, t_t: torch.Tensor, p_s: torch.Tensor, t_s: torch.Tensor
) -> torch.Tensor:
    """RoI consistency on zero-mean class logits and box deltas, normalised by ``K * C``."""
    if p_s.shape != p_t.shape or t_s.shape != t_t.shape:
        raise ValueError("teacher and student RoI outputs differ in shape")
    if p_s.shape[0] == 0:
        return _zero(p_s) + _zero(t_s)
    p_t, t_t = p_t.detach(), t_t.detach()
    pt = p_t - p_t.mean(dim=1, keepdim=True)
    ps = p_s - p_s.mean(dim=1, keepdim=True)
    k, c = p_s.shape
    return (((pt - ps) ** 2).sum() + ((t_t - t_s) ** 2).sum()) / (k * c)


def _as_float(x: Number) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


@dataclass
class LossBreakdown:
    embed: Number = 0.0
    aux: Number = 0.0
    dc_rpn: Number = 0.0
    dc_roi: Number = 0.0
    total: Number = 0.0
    weights: tuple[float, float, float, float] = DEFAULT_GAMMAS
    step: int | None = field(default=None, compare=False)

    def values(self) -> dict[str, float]:
        return {name: _as_float(getattr(self, name)) for name in COMPONENTS + ("total",)}

    def to_json(self) -> str:
        record = {"step": self.step, **self.values()}
        return json.dumps(record, sort_keys=True)


def total_loss(
    embed: Number = 0.0,
    aux: Number = 0.0,
    dc_rpn: Number = 0.0,
    dc_roi: Number = 0.0,
    gammas: Sequence[float] = DEFAULT_GAMMAS,
) -> LossBreakdown:
    """Weighted sum of the four components; tensors stay differentiable."""
    parts = {"embed": embed, "aux": aux, "dc_rpn": dc_rpn, "dc_roi": dc_roi}
    for name, value in parts.items():
        if not math.isfinite(_as_float(value)):
            raise NumericDomainError(f"non-finite loss component {name!r}: {_as_float(value)}")
    g1, g2, g3, g4 = (float(g) for g in gammas)
    total = g1 * embed + g2 * aux + g3 * dc_rpn + g4 * dc_roi
    return LossBreakdown(embed, aux, dc_rpn, dc_roi, total, (g1, g2, g3, g4))
