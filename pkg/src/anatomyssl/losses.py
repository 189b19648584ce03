"""Loss functions: mask pooling, region-level contrast, context prediction,
their combination, and the BCE+Dice segmentation adaptation loss.

The contrastive term for one anchor with prediction q̄, matching target
projection z̄⁺ and non-matching targets {z̄ⁿ} (all unit-norm) is::

    -log  exp(<q̄, z̄⁺>/τ) / (exp(<q̄, z̄⁺>/τ) + Σₙ exp(<q̄, z̄ⁿ>/τ))
      =   log1p( Σₙ exp((<q̄, z̄ⁿ> - <q̄, z̄⁺>)/τ) )

which is exactly 0 for an empty negative set and numerically safe for the
temperatures used here. Negatives are all instances in the batch whose
identity key differs, at the same scale; target-side tensors are detached by
the caller so gradients reach the online branch only.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import LossConfig


class EmptyMaskError(ValueError):
    """Mask with zero total weight; the caller must exclude the instance."""


class BatchSkip(RuntimeError):
    """Every instance of a batch was excluded; skip the step."""


def mask_pool(feature_map: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Area-normalized weighted mean of a (C, H, W) map under (H, W) weights."""
    if feature_map.shape[-2:] != weights.shape:
        raise ValueError(
            f"weights {tuple(weights.shape)} do not match map {tuple(feature_map.shape)}")
    mass = weights.sum()
    if mass.item() <= 0.0:
        raise EmptyMaskError("mask has zero total weight")
    return (feature_map * weights.unsqueeze(0)).sum(dim=(-1, -2)) / mass


def mask_pool_batch(feature_map: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Batched pooling: (B, C, H, W) x (B, K, H, W) -> (B, K, C)."""
    mass = weights.sum(dim=(-1, -2))
    if (mass <= 0).any():
        raise EmptyMaskError("a sampled mask has zero total weight")
    num = torch.einsum("bchw,bkhw->bkc", feature_map, weights)
    return num / mass.unsqueeze(-1)


def l2_normalize(x: torch.Tensor, dim: int = -1, eps: float = 1e-12) -> torch.Tensor:
    return x / x.norm(dim=dim, keepdim=True).clamp_min(eps)


def _check_unit(name, v, tol=1e-6):
    norms = v.norm(dim=-1)
    if (norms - 1.0).abs().max().item() > tol:
        raise ValueError(f"{name} must be unit-norm within {tol}")


def anatomy_contrast_loss(q: torch.Tensor, z_pos: torch.Tensor,
                          negatives: torch.Tensor | list, tau: float) -> torch.Tensor:
    """Single-anchor separating loss; ``negatives`` may be empty (loss 0)."""
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if isinstance(negatives, (list, tuple)):
        negatives = (torch.stack(negatives) if negatives
                     else q.new_zeros((0, q.shape[-1])))
    _check_unit("q", q)
    _check_unit("z_pos", z_pos)
    if negatives.numel():
        _check_unit("negatives", negatives)
    pos = (q * z_pos).sum()
    if negatives.shape[0] == 0:
        return q.new_zeros(())
    neg = negatives @ q
    return torch.log1p(torch.exp((neg - pos) / tau).sum())


def contrast_rows(q: torch.Tensor, z: torch.Tensor, keys: torch.Tensor,
                  tau: float) -> torch.Tensor:
    """Per-anchor losses for paired rows (q_i, z_i) with identity keys.

    Negatives for anchor i are all z_j with keys[j] != keys[i]; rows with an
    empty negative set contribute exactly 0.
    """
    sims = q @ z.t() / tau
    pos = sims.diagonal()
    neg_mask = keys.unsqueeze(0) != keys.unsqueeze(1)
    expdiff = torch.exp(sims - pos.unsqueeze(1)) * neg_mask
    return torch.log1p(expdiff.sum(dim=1))


@dataclass
class AnatomyBatch:
    """Mask-pooled vectors per scale for both views and both branches.

    Each list holds one (N, C) tensor per scale; row i of every tensor refers
    to the same (image, structure) instance, identified by ``keys[i]``.
    """

    online_v1: list
    online_v2: list
    target_v1: list
    target_v2: list
    keys: torch.Tensor


def aggregate_anatomy_loss(batch: AnatomyBatch, online_heads, target_heads,
                           cfg: LossConfig):
    """Mean over instances, summed over scales, of the two view directions.

    ``online_heads`` / ``target_heads`` expose project/predict per scale (the
    online path adds the predictor). Target projections are detached here.
    Returns (scalar loss, per-scale component list).
    """
    n_scales = len(batch.online_v1)
    if batch.keys.numel() == 0:
        raise BatchSkip("no instances left after exclusions")
    total = None
    per_scale = []
    for s in range(n_scales):
        q1 = l2_normalize(online_heads.predict(online_heads.project(
            batch.online_v1[s], s), s))
        z2 = l2_normalize(target_heads.project(batch.target_v2[s], s)).detach()
        l_fwd = contrast_rows(q1, z2, batch.keys, cfg.tau)
        if cfg.symmetric:
            q2 = l2_normalize(online_heads.predict(online_heads.project(
                batch.online_v2[s], s), s))
            z1 = l2_normalize(target_heads.project(batch.target_v1[s], s)).detach()
            l_scale = l_fwd + contrast_rows(q2, z1, batch.keys, cfg.tau)
        else:
            l_scale = l_fwd
        scale_mean = l_scale.mean()
        per_scale.append(scale_mean)
        total = scale_mean if total is None else total + scale_mean
    return total, per_scale


def context_prediction_loss(online_maps, target_maps, reduction: str = "mean"):
    """Per-scale distance between damaged-crop (online) and intact-crop
    (target) feature maps: reduced over elements per scale, summed over
    scales. Targets are detached. Returns (scalar, per-scale list)."""
    if len(online_maps) != len(target_maps):
        raise ValueError("scale count mismatch")
    total = None
    per_scale = []
    for o, t in zip(online_maps, target_maps):
        if o.shape != t.shape:
            raise ValueError(f"shape mismatch {tuple(o.shape)} vs {tuple(t.shape)}")
        diff = (o - t.detach()) ** 2
        term = diff.mean() if reduction == "mean" else diff.sum()
        per_scale.append(term)
        total = term if total is None else total + term
    return total, per_scale


def total_loss(l_ana: torch.Tensor, l_ctx: torch.Tensor, cfg: LossConfig):
    """l_ana + lambda_ctx * l_ctx (bitwise equal to l_ana when lambda is 0)."""
    if cfg.lambda_ctx == 0.0:
        return l_ana
    return l_ana + cfg.lambda_ctx * l_ctx


def seg_adapt_loss(logits: torch.Tensor, gt: torch.Tensor,
                   alpha: float) -> torch.Tensor:
    """(1 - alpha) * BCE + alpha * Dice loss, Dice smoothing eps = 1."""
    if logits.shape != gt.shape:
        raise ValueError("logits/gt shape mismatch")
    gt = gt.to(logits.dtype)
    bce = F.binary_cross_entropy_with_logits(logits, gt)
    p = torch.sigmoid(logits)
    eps = 1.0
    dice = 1.0 - (2.0 * (p * gt).sum() + eps) / (p.sum() + gt.sum() + eps)
    return (1.0 - alpha) * bce + alpha * dice
