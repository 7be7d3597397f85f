"""Hierarchical consistency losses for the dual-branch scheme.

Pixel level: per-voxel cross-entropy maps decide, voxel by voxel, which
branch is the more reliable teacher; tempered KL then flows only into the
receiving branch. Feature level: class prototypes of the fused features
build inter-sample/inter-class cosine similarity matrices whose squared
difference, re-weighted by class uncertainty, aligns the two branches'
relational structure.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ShapeError, ValidationError

logger = logging.getLogger(__name__)

WEIGHT_LOG_EPS = 1e-12


@dataclass
class PrototypeSet:
    prototypes: torch.Tensor  # [B, C, d_f]
    valid: torch.Tensor       # [B, C] bool; False => prototype is the zero vector


def pixel_ce_map(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-voxel cross entropy, no spatial reduction.

    logits [C, H, W, Z] or [B, C, H, W, Z]; labels match without the class axis.
    """
    C = logits.shape[-4]
    if labels.min() < 0 or labels.max() >= C:
        raise ValidationError(
            f"labels must lie in [0, {C - 1}], found range [{labels.min()}, {labels.max()}]"
        )
    logp = F.log_softmax(logits, dim=-4)
    return -torch.gather(logp, -4, labels.long().unsqueeze(-4)).squeeze(-4)


def transfer_mask(q1: torch.Tensor, q2: torch.Tensor) -> torch.Tensor:
    """1 where branch 2 is strictly the better teacher; ties go to 0."""
    if q1.shape != q2.shape:
        raise ShapeError(f"loss map shapes differ: {tuple(q1.shape)} vs {tuple(q2.shape)}")
    return q1 > q2


def _voxel_kl(student_logits, teacher_logits, tau):
    ps = F.log_softmax(student_logits / tau, dim=-4)
    pt = F.log_softmax(teacher_logits.detach() / tau, dim=-4)
    return (ps.exp() * (ps - pt)).sum(dim=-4)


def pbc_loss(logits1: torch.Tensor, logits2: torch.Tensor, tmask: torch.Tensor,
             tau: float, tau_sq_scale: bool = False):
    """Transfer-mask-gated tempered KL, one scalar per branch.

    The receiving branch's tempered softmax is the first KL argument; the
    teacher side is detached. Empty transfer sets yield an exact 0.
    """
    if tau <= 0:
        raise ValidationError(f"temperature must be > 0, got {tau}")
    tmask = tmask.to(logits1.dtype)
    n21 = tmask.sum()
    n12 = (1 - tmask).sum()
    kl1 = _voxel_kl(logits1, logits2, tau)
    kl2 = _voxel_kl(logits2, logits1, tau)
    zero = logits1.new_zeros(())
    l1 = (tmask * kl1).sum() / n21 if n21 > 0 else zero
    l2 = ((1 - tmask) * kl2).sum() / n12 if n12 > 0 else zero
    if tau_sq_scale:
        l1, l2 = l1 * tau**2, l2 * tau**2
    return l1, l2


def downsample_labels(labels: torch.Tensor, target_dims) -> torch.Tensor:
    """Nearest-corner subsampling of a categorical volume."""
    H, W, Z = labels.shape[-3:]
    th, tw, tz = target_dims
    if H % th or W % tw or Z % tz:
        raise ShapeError(f"dims {(H, W, Z)} not divisible by target {tuple(target_dims)}")
    return labels[..., :: H // th, :: W // tw, :: Z // tz]


def class_prototypes(fused: torch.Tensor, labels_f: torch.Tensor, C: int) -> PrototypeSet:
    """Mean fused-feature vector per (sample, class); absent classes get a
    zero prototype flagged invalid."""
    B, d_f = fused.shape[0], fused.shape[1]
    flat_feat = fused.reshape(B, d_f, -1)                   # [B, d_f, N]
    flat_lab = labels_f.reshape(B, -1).long()               # [B, N]
    onehot = F.one_hot(flat_lab, C).to(fused.dtype)         # [B, N, C]
    counts = onehot.sum(dim=1)                              # [B, C]
    sums = torch.einsum("bdn,bnc->bcd", flat_feat, onehot)  # [B, C, d_f]
    valid = counts > 0
    protos = sums / counts.clamp(min=1).unsqueeze(-1)
    protos = protos * valid.unsqueeze(-1)
    return PrototypeSet(prototypes=protos, valid=valid)


def relation_matrix(protos: PrototypeSet) -> torch.Tensor:
    """Cosine-similarity matrix over the flattened (sample, class) axis;
    rows/columns of invalid prototypes are zeroed."""
    B, C, d_f = protos.prototypes.shape
    p = protos.prototypes.reshape(B * C, d_f)
    valid = protos.valid.reshape(B * C)
    norms = p.norm(dim=-1)
    zero_valid = valid & (norms == 0)
    if zero_valid.any():
        logger.warning(
            "%d valid prototypes have exactly-zero features; their cosines are set to 0",
            int(zero_valid.sum()),
        )
    keep_bool = valid & ~zero_valid
    safe = torch.where(keep_bool, norms, torch.ones_like(norms))
    r = (p @ p.T) / (safe.unsqueeze(0) * safe.unsqueeze(1))
    keep = keep_bool.to(p.dtype)
    return r * keep.unsqueeze(0) * keep.unsqueeze(1)


def relational_distance(r1: torch.Tensor, r2: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Row sums of squared relation differences, restricted to entries whose
    both endpoints are valid. Returns [B, C]."""
    if r1.shape != r2.shape:
        raise ShapeError(f"relation matrix shapes differ: {tuple(r1.shape)} vs {tuple(r2.shape)}")
    B, C = valid.shape
    vflat = valid.reshape(B * C).to(r1.dtype)
    pair = vflat.unsqueeze(0) * vflat.unsqueeze(1)
    d = (((r1 - r2) ** 2) * pair).sum(dim=1)
    return (d * vflat).reshape(B, C)


def class_uncertainty_weights(logits1: torch.Tensor, logits2: torch.Tensor) -> torch.Tensor:
    """Per-(sample, class) softmax entropy mass, averaged over branches and
    detached: a constant re-weighting of the relational loss."""

    def per_branch(logits):
        p = F.softmax(logits, dim=1)
        ent = -p * torch.log(p + WEIGHT_LOG_EPS)
        return ent.sum(dim=tuple(range(2, logits.dim())))  # [B, C]

    return ((per_branch(logits1) + per_branch(logits2)) / 2).detach()


def frc_loss(d_r: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Weighted sum of relational distances; raw sum over samples and classes."""
    if d_r.shape != weights.shape:
        raise ShapeError(f"shapes differ: {tuple(d_r.shape)} vs {tuple(weights.shape)}")
    return (d_r * weights).sum()


def frc_from_batch(fused1: torch.Tensor, fused2: torch.Tensor, labels: torch.Tensor,
                   logits1: torch.Tensor, logits2: torch.Tensor, C: int) -> torch.Tensor:
    """Full feature-level relational loss for one mini-batch."""
    labels_f = downsample_labels(labels, fused1.shape[-3:])
    protos1 = class_prototypes(fused1, labels_f, C)
    protos2 = class_prototypes(fused2, labels_f, C)
    r1 = relation_matrix(protos1)
    r2 = relation_matrix(protos2)
    valid = protos1.valid & protos2.valid
    d_r = relational_distance(r1, r2, valid)
    w = class_uncertainty_weights(logits1, logits2)
    return frc_loss(d_r, w)
