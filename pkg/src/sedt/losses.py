"""Training objectives for event detection and random-patch pretraining.

All per-clip functions take already-matched tensors so they are plain
differentiable expressions; matching happens outside the autograd graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

TAG_EPS = 1e-7
NORM_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    lambda_loc: float = 1.0
    lambda_c: float = 1.0
    lambda_iou: float = 2.0
    lambda_l1: float = 5.0
    lambda_rec: float = 1.0
    lambda_at: float = 1.0
    background_class_weight: float = 0.1

    def __post_init__(self):
        for name, value in vars(self).items():
            if not (value >= 0 and value < float("inf")):
                raise ValueError(f"{name} must be finite and non-negative, got {value}")


def interval_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise IOU of (center, length) pairs, ``[K, 2]`` -> ``[K]``."""
    a_on, a_off = a[:, 0] - a[:, 1] / 2, a[:, 0] + a[:, 1] / 2
    b_on, b_off = b[:, 0] - b[:, 1] / 2, b[:, 0] + b[:, 1] / 2
    inter = (torch.minimum(a_off, b_off) - torch.maximum(a_on, b_on)).clamp(min=0)
    union = a[:, 1] + b[:, 1] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(union))


def location_loss(target_boxes: torch.Tensor, pred_boxes: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    """Sum over matched pairs of ``lambda_iou * (1 - IOU) + lambda_l1 * |b - b_hat|_1``."""
    if target_boxes.numel() == 0:
        return pred_boxes.sum() * 0.0
    iou_term = 1.0 - interval_iou(target_boxes, pred_boxes)
    l1_term = (target_boxes - pred_boxes).abs().sum(-1)
    return (weights.lambda_iou * iou_term + weights.lambda_l1 * l1_term).sum()


def slot_targets(n_slots: int, pairs, labels, background: int) -> torch.Tensor:
    """Class target per prediction slot: matched label, background elsewhere."""
    out = torch.full((n_slots,), background, dtype=torch.long)
    for t, p in pairs:
        out[p] = int(labels[t])
    return out


def classification_loss(class_logits: torch.Tensor, slot_labels: torch.Tensor, background: int,
                        background_weight: float) -> torch.Tensor:
    """Mean over all N slots of ``-log p_hat(c)``; background slots are down-weighted."""
    logp = F.log_softmax(class_logits, dim=-1)
    nll = -logp.gather(-1, slot_labels[:, None]).squeeze(-1)
    w = torch.where(slot_labels == background,
                    torch.full_like(nll, background_weight), torch.ones_like(nll))
    return (w * nll).sum() / class_logits.shape[0]


def tagging_loss(tag_probs: torch.Tensor, tag_targets: torch.Tensor) -> torch.Tensor:
    """Mean per-class binary cross-entropy on clamped probabilities."""
    if tag_probs.numel() == 0:
        raise ValueError("tagging loss needs at least one class")
    p = tag_probs.clamp(TAG_EPS, 1 - TAG_EPS)
    y = tag_targets.to(p.dtype)
    return -(y * p.log() + (1 - y) * (1 - p).log()).mean()


def reconstruction_loss(patch_features: torch.Tensor, recon_features: torch.Tensor) -> torch.Tensor:
    """Mean over matched pairs of the squared distance between unit-normalized vectors."""
    if patch_features.numel() == 0:
        return recon_features.sum() * 0.0
    p = F.normalize(patch_features, dim=-1, eps=NORM_EPS)
    q = F.normalize(recon_features, dim=-1, eps=NORM_EPS)
    return ((p - q) ** 2).sum(-1).mean()


def detection_loss(class_logits, boundaries, tag_probs, target_labels, target_boxes, tag_targets,
                   pairs, weights: LossWeights, background: int) -> dict[str, torch.Tensor]:
    """Fine-tuning loss for one strongly labelled clip.

    ``pairs`` are (target, slot) indices from the matcher. Returns the
    weighted total under ``"total"`` plus the unweighted components.
    """
    t_idx = [t for t, _ in pairs]
    p_idx = [p for _, p in pairs]
    loc = location_loss(target_boxes[t_idx], boundaries[p_idx], weights)
    slots = slot_targets(class_logits.shape[0], pairs, target_labels, background)
    cls = classification_loss(class_logits, slots, background, weights.background_class_weight)
    total = weights.lambda_loc * loc + weights.lambda_c * cls
    out = {"loc": loc, "c": cls}
    if tag_probs is not None and weights.lambda_at > 0:
        at = tagging_loss(tag_probs, tag_targets)
        total = total + weights.lambda_at * at
        out["at"] = at
    out["total"] = total
    return out


def pretrain_loss(class_logits, boundaries, recon, patch_boxes, patch_features, pairs,
                  weights: LossWeights) -> dict[str, torch.Tensor]:
    """Patch-detection loss: patch/background CE + location + reconstruction.

    Slot class 0 is "patch", 1 is "background".
    """
    t_idx = [t for t, _ in pairs]
    p_idx = [p for _, p in pairs]
    loc = location_loss(patch_boxes[t_idx], boundaries[p_idx], weights)
    slots = slot_targets(class_logits.shape[0], pairs, [0] * len(patch_boxes), 1)
    cls = classification_loss(class_logits, slots, 1, weights.background_class_weight)
    rec = reconstruction_loss(patch_features[t_idx], recon[p_idx])
    total = weights.lambda_c * cls + weights.lambda_loc * loc + weights.lambda_rec * rec
    return {"c": cls, "loc": loc, "rec": rec, "total": total}
