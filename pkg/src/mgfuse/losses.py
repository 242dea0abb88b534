"""Training objectives for the three-branch fusion network.

All KL terms are directed distillation: the guiding (teacher) distribution
is detached, so gradients flow only into the mimicking head. Every term is
a mean over its batch's participating points, which keeps the coefficients
independent of batch size.

Masking policy: terms whose teacher is the 2D branch, and the 2D head's
supervised term, are restricted to points with a valid image projection;
all other terms use every point.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

LOG_EPS = 1e-8  # floor inside log() on the mimicking distribution


class EmptyMaskWarning(UserWarning):
    """A loss term received a mask selecting no points; its value is 0."""


@dataclass
class LossWeights:
    """Scalar coefficients of the composite objective."""
    lambda_guide: float = 1.0  # mixes the 2D (lambda) vs 3D (1 - lambda) guidance teacher
    lambda_source: float = 1.0
    lambda_target: float = 0.1
    lambda_pl: float = 1.0
    guide_on_source: bool = True

    def __post_init__(self):
        if not 0.0 <= self.lambda_guide <= 1.0:
            raise ValueError("lambda_guide must lie in [0, 1]")
        for name in ("lambda_source", "lambda_target", "lambda_pl"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative")


class PredictionSet:
    """Branch outputs of one batch plus their softmax distributions.

    ``domain`` tags where the batch came from ("source" or "target");
    ``valid_mask`` marks points with a valid image projection.
    """

    def __init__(self, outputs, domain: str):
        if domain not in ("source", "target"):
            raise ValueError("domain must be 'source' or 'target'")
        self.outputs = outputs
        self.domain = domain

    @property
    def valid_mask(self) -> torch.Tensor:
        return self.outputs.valid_mask

    @property
    def p_2d_main(self) -> torch.Tensor:
        return F.softmax(self.outputs.logits_2d_main, dim=1)

    @property
    def p_3d_main(self) -> torch.Tensor:
        return F.softmax(self.outputs.logits_3d_main, dim=1)

    @property
    def p_3d_mmc(self) -> torch.Tensor:
        return F.softmax(self.outputs.logits_3d_mmc, dim=1)

    @property
    def p_fuse_main(self) -> torch.Tensor:
        return F.softmax(self.outputs.logits_fuse_main, dim=1)

    @property
    def p_fuse_mmc(self) -> torch.Tensor:
        return F.softmax(self.outputs.logits_fuse_mmc, dim=1)

    @property
    def p_fuse_mmc2(self) -> torch.Tensor:
        if self.outputs.logits_fuse_mmc2 is None:
            raise ValueError("this model has no second fusion mimicry head")
        return F.softmax(self.outputs.logits_fuse_mmc2, dim=1)


def _masked_mean(per_point: torch.Tensor, mask: torch.Tensor | None, what: str) -> torch.Tensor:
    if mask is None:
        if per_point.numel() == 0:
            warnings.warn(f"{what}: empty batch, loss defined as 0", EmptyMaskWarning)
            return per_point.sum() * 0.0
        return per_point.mean()
    mask = mask.bool()
    if not bool(mask.any()):
        warnings.warn(f"{what}: mask selects no points, loss defined as 0", EmptyMaskWarning)
        return (per_point * 0.0).sum()
    return per_point[mask].mean()


def kl_divergence(p_guide: torch.Tensor, p_mimic: torch.Tensor,
                  mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over masked points of sum_k p_guide * log(p_guide / p_mimic).

    The teacher ``p_guide`` is detached; ``p_mimic`` is floored at
    ``LOG_EPS`` inside the log. An all-false mask yields 0 with a warning.
    """
    p_guide = p_guide.detach()
    per_point = (torch.xlogy(p_guide, p_guide)
                 - p_guide * torch.log(torch.clamp(p_mimic, min=LOG_EPS))).sum(dim=1)
    return _masked_mean(per_point, mask, "kl_divergence")


def seg_loss(logits: torch.Tensor, labels: torch.Tensor,
             mask: torch.Tensor | None = None) -> torch.Tensor:
    """Masked mean cross entropy, -log softmax(logits)[label]."""
    k = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    per_point = F.cross_entropy(logits, labels, reduction="none")
    return _masked_mean(per_point, mask, "seg_loss")


def align_loss(pred: PredictionSet) -> torch.Tensor:
    """Fusion main head (teacher) guiding the 3D mimicry head, over all points."""
    return kl_divergence(pred.p_fuse_main, pred.p_3d_mmc, mask=None)


def guide_loss(pred: PredictionSet, lam: float, symal: bool = False) -> torch.Tensor:
    """Pull the fusion mimicry distribution toward the 2D or 3D main head.

    The 2D-teacher term is restricted to validly projected points. With
    ``symal`` each teacher gets its own fusion mimicry head and the mix is
    fixed at 0.5/0.5.
    """
    if symal:
        t2d = kl_divergence(pred.p_2d_main, pred.p_fuse_mmc, pred.valid_mask)
        t3d = kl_divergence(pred.p_3d_main, pred.p_fuse_mmc2, mask=None)
        return 0.5 * t2d + 0.5 * t3d
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    t2d = kl_divergence(pred.p_2d_main, pred.p_fuse_mmc, pred.valid_mask)
    t3d = kl_divergence(pred.p_3d_main, pred.p_fuse_mmc, mask=None)
    return lam * t2d + (1.0 - lam) * t3d


def _supervised_terms(pred: PredictionSet, labels: torch.Tensor,
                      extra_mask: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
    """Per-branch segmentation losses; the 2D head sees only valid projections."""
    mask_2d = pred.valid_mask
    if extra_mask is not None:
        mask_2d = mask_2d & extra_mask
    return {
        "seg_2d": seg_loss(pred.outputs.logits_2d_main, labels, mask_2d),
        "seg_3d": seg_loss(pred.outputs.logits_3d_main, labels, extra_mask),
        "seg_fuse": seg_loss(pred.outputs.logits_fuse_main, labels, extra_mask),
    }


def _cross_modal(pred: PredictionSet, weights: LossWeights, guide_mode: str) -> tuple[torch.Tensor, torch.Tensor]:
    align = align_loss(pred)
    if guide_mode == "none":
        guide = torch.zeros_like(align)
    elif guide_mode == "symal":
        guide = guide_loss(pred, 0.5, symal=True)
    elif guide_mode == "mg":
        guide = guide_loss(pred, weights.lambda_guide)
    else:
        raise ValueError(f"unknown guide_mode {guide_mode!r}")
    if pred.domain == "source" and not weights.guide_on_source:
        guide = torch.zeros_like(align)
    return align, guide


def stage1_objective(source_pred: PredictionSet, target_pred: PredictionSet,
                     source_labels: torch.Tensor, weights: LossWeights,
                     guide_mode: str = "mg") -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Supervised source terms plus cross-modal terms on both domains.

    Returns the scalar objective and a per-term breakdown. Target batches
    carry no labels; only source predictions receive supervision here.
    """
    if source_pred.domain != "source" or target_pred.domain != "target":
        raise ValueError("stage1_objective expects (source, target) prediction sets")
    terms = {f"{k}_src": v for k, v in _supervised_terms(source_pred, source_labels).items()}
    align_s, guide_s = _cross_modal(source_pred, weights, guide_mode)
    align_t, guide_t = _cross_modal(target_pred, weights, guide_mode)
    terms.update(align_src=align_s, guide_src=guide_s, align_tgt=align_t, guide_tgt=guide_t)
    total = (terms["seg_2d_src"] + terms["seg_3d_src"] + terms["seg_fuse_src"]
             + weights.lambda_source * (align_s + guide_s)
             + weights.lambda_target * (align_t + guide_t))
    terms["total"] = total
    return total, terms


def pseudo_labels(pred: PredictionSet) -> tuple[np.ndarray, np.ndarray]:
    """Average the fusion and 3D main softmax scores into target labels.

    Returns ``(soft, hard)``: soft N x K rows summing to 1, and their argmax
    (first index on ties). Call on eval-mode predictions of a frozen model.
    """
    with torch.no_grad():
        soft = 0.5 * (pred.p_fuse_main + pred.p_3d_main)
    soft_np = soft.cpu().numpy()
    return soft_np, np.argmax(soft_np, axis=1).astype(np.int64)


def stage2_objective(source_pred: PredictionSet, target_pred: PredictionSet,
                     source_labels: torch.Tensor, target_pseudo: torch.Tensor,
                     weights: LossWeights, guide_mode: str = "mg",
                     pl_confidence_mask: torch.Tensor | None = None,
                     ) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Stage-1 objective plus supervised terms on pseudo-labeled target points.

    ``pl_confidence_mask`` optionally restricts the pseudo-label terms to
    confident points; by default every point participates.
    """
    total, terms = stage1_objective(source_pred, target_pred, source_labels, weights, guide_mode)
    pl = {f"{k}_pl": v for k, v in
          _supervised_terms(target_pred, target_pseudo, pl_confidence_mask).items()}
    terms.update(pl)
    total = total + weights.lambda_pl * (pl["seg_2d_pl"] + pl["seg_3d_pl"] + pl["seg_fuse_pl"])
    terms["total"] = total
    return total, terms
