"""Backbone tagging pretraining and random-patch detection pretraining.

The pretext task crops ``M`` random time spans from each unlabeled
spectrogram, embeds every crop with the frozen backbone (global average
pooling), adds the embedding to its block of ``N / M`` decoder queries and
asks the detector to find where each crop came from.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .assignment import MatchWeights, cost_matrix, hungarian, pairwise_iou
from .data import FeatureSet, iterate_batches
from .losses import LossWeights, pretrain_loss
from .metrics import tagging_f1
from .network import SEDT, Backbone, ModelConfig, gap_patch_feature

logger = logging.getLogger(__name__)


class PatchError(ValueError):
    pass


@dataclass(frozen=True)
class PatchTarget:
    start: int
    end: int
    n_frames: int

    @property
    def frame_span(self) -> tuple[int, int]:
        return self.start, self.end

    @property
    def boundary(self) -> tuple[float, float]:
        """(center, length) as fractions of the clip."""
        return (self.start + self.end) / (2 * self.n_frames), (self.end - self.start) / self.n_frames

    @classmethod
    def from_boundary(cls, center: float, length: float, n_frames: int) -> "PatchTarget":
        start = int(round((center - length / 2) * n_frames))
        end = int(round((center + length / 2) * n_frames))
        return cls(start, end, n_frames)


def crop_patches(n_frames: int, n_patches: int, length_range: tuple[float, float],
                 rng: np.random.Generator | int, min_frames: int = 1) -> list[PatchTarget]:
    """Draw ``n_patches`` time spans (full frequency extent); spans may overlap."""
    if n_patches < 1:
        raise PatchError("need at least one patch")
    lo, hi = length_range
    if not (0 < lo <= hi <= 1):
        raise PatchError(f"length_range must lie in (0, 1], got {length_range}")
    min_len = max(min_frames, int(round(lo * n_frames)))
    max_len = int(round(hi * n_frames))
    if max_len < min_len or n_frames < min_frames:
        raise PatchError(
            f"clip of {n_frames} frames is too short for patches of at least {min_frames} frames")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    out = []
    for _ in range(n_patches):
        length = int(round(rng.uniform(lo, hi) * n_frames))
        length = min(max(length, min_len), max_len)
        start = int(rng.integers(0, n_frames - length + 1))
        out.append(PatchTarget(start, start + length, n_frames))
    return out


# --- backbone pretraining via clip tagging ---------------------------------


class TaggingNet(nn.Module):
    def __init__(self, backbone: Backbone, n_classes: int):
        super().__init__()
        self.backbone = backbone
        self.head = nn.Linear(backbone.out_channels, n_classes)

    def forward(self, x):
        return self.head(self.backbone(x).mean(dim=(2, 3)))


@dataclass
class BackboneConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 3e-3
    weight_decay: float = 1e-4
    seed: int = 0
    threshold: float = 0.5
    lr_drop_epoch: int = 7  # multiply the learning rate by 0.1 after this epoch; 0 disables


def pretrain_backbone(train: FeatureSet, model_cfg: ModelConfig, cfg: BackboneConfig,
                      val: Optional[FeatureSet] = None) -> tuple[dict, list[dict]]:
    """Fit backbone + GAP + linear tagger with per-class BCE; return backbone weights and log."""
    if not any(r.annotation_kind in ("weak", "strong") for r in train.records):
        raise ValueError("backbone pretraining needs clips with clip-level tags")
    torch.manual_seed(cfg.seed)
    net = TaggingNet(Backbone(model_cfg.backbone_channels, model_cfg.backbone_strides),
                     len(train.class_names))
    opt = torch.optim.AdamW(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    tags = torch.stack([train.targets(i)[2] for i in range(len(train))])
    log = []
    for epoch in range(1, cfg.epochs + 1):
        if cfg.lr_drop_epoch and epoch == cfg.lr_drop_epoch + 1:
            for group in opt.param_groups:
                group["lr"] *= 0.1
        net.train()
        total, n = 0.0, 0
        for idx in iterate_batches(len(train), cfg.batch_size, gen):
            loss = F.binary_cross_entropy_with_logits(net(train.features[idx]), tags[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            n += 1
        row = {"epoch": epoch, "loss_bce": total / max(n, 1)}
        if val is not None and len(val):
            row["val_at_f1"] = tagging_macro_f1(net, val, cfg.threshold)
        logger.info("backbone %s", row)
        log.append(row)
    state = {f"backbone.{k}": v.detach().clone() for k, v in net.backbone.state_dict().items()}
    return state, log


@torch.no_grad()
def tagging_macro_f1(net: TaggingNet, data: FeatureSet, threshold: float = 0.5) -> float:
    net.eval()
    probs = torch.sigmoid(net(data.features)).numpy()
    refs = {r.clip_id: set(r.tags) for r in data.records}
    hyp = {r.clip_id: {data.class_names[c] for c in np.nonzero(probs[i] >= threshold)[0]}
           for i, r in enumerate(data.records)}
    return tagging_f1(refs, hyp, classes=data.class_names).macro_f1


# --- random patch detection ------------------------------------------------


@dataclass
class PretrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 1e-4
    grad_clip: float = 0.1
    length_range: tuple[float, float] = (0.1, 0.5)
    per_group_matching: bool = True
    loss: LossWeights = field(default_factory=LossWeights)
    matcher: MatchWeights = field(default_factory=MatchWeights)
    seed: int = 0
    lr_drop_epoch: int = 0  # multiply the learning rate by 0.1 after this epoch; 0 disables


def freeze_backbone(model: SEDT) -> None:
    for p in model.backbone.parameters():
        p.requires_grad_(False)
    model.backbone.eval()


def train_mode(model: SEDT) -> None:
    """``model.train()`` except the frozen backbone keeps its eval statistics."""
    model.train()
    model.backbone.eval()


@torch.no_grad()
def patch_features(model: SEDT, spectrograms: torch.Tensor, patches: Sequence[Sequence[PatchTarget]]) -> torch.Tensor:
    """GAP backbone features for each crop: ``[B, M, C]``."""
    rows = []
    for b, clip_patches in enumerate(patches):
        rows.append(torch.stack([
            gap_patch_feature(model.backbone, spectrograms[b, p.start:p.end]) for p in clip_patches]))
    return torch.stack(rows)


def match_patches(class_probs: np.ndarray, boxes: np.ndarray, patch_boxes: np.ndarray,
                  n_queries: int, weights: MatchWeights, per_group: bool = True) -> list[tuple[int, int]]:
    """Assign each patch to one slot, within its own query block when ``per_group``."""
    m = len(patch_boxes)
    if not per_group:
        cost = cost_matrix(patch_boxes, [0] * m, class_probs, boxes, weights)
        return hungarian(cost).pairs
    group = n_queries // m
    pairs = []
    for g in range(m):
        sl = slice(g * group, (g + 1) * group)
        cost = cost_matrix(patch_boxes[g:g + 1], [0], class_probs[sl], boxes[sl], weights)
        (t, p), = hungarian(cost).pairs
        pairs.append((g, g * group + p))
    return pairs


def pretrain_step(model: SEDT, spectrograms: torch.Tensor, cfg: PretrainConfig,
                  rng: np.random.Generator, optimizer: Optional[torch.optim.Optimizer] = None) -> dict:
    """One pretext update (or a loss evaluation when ``optimizer`` is None).

    Returns the λ-weighted total, the unweighted components and the mean
    IOU between matched predictions and their patches.
    """
    if any(p.requires_grad for p in model.backbone.parameters()):
        raise RuntimeError("the backbone must be frozen for patch pretraining")
    n_frames = spectrograms.shape[1]
    m = model.config.n_patches
    patches = [crop_patches(n_frames, m, cfg.length_range, rng, model.backbone.receptive_field)
               for _ in range(spectrograms.shape[0])]
    feats = patch_features(model, spectrograms, patches)
    out = model(spectrograms, feats)
    probs = out.class_probs.detach().double().numpy()
    boxes = out.boundaries.detach().double().numpy()
    totals: dict[str, torch.Tensor] = {}
    ious = []
    bsz = spectrograms.shape[0]
    for b in range(bsz):
        pboxes = np.array([p.boundary for p in patches[b]])
        pairs = match_patches(probs[b], boxes[b], pboxes, model.config.n_queries, cfg.matcher,
                              cfg.per_group_matching)
        parts = pretrain_loss(out.class_logits[b], out.boundaries[b], out.recon[b],
                              torch.tensor(pboxes, dtype=out.boundaries.dtype), feats[b], pairs, cfg.loss)
        for k, v in parts.items():
            totals[k] = totals.get(k, 0.0) + v / bsz
        ious.extend(matched_iou(pboxes, boxes[b], pairs))
    if optimizer is not None:
        optimizer.zero_grad()
        totals["total"].backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_([p for p in model.parameters() if p.requires_grad], cfg.grad_clip)
        optimizer.step()
    diag = {k: float(v.detach()) for k, v in totals.items()}
    diag["matched_iou"] = float(np.mean(ious))
    return diag


def matched_iou(patch_boxes: np.ndarray, pred_boxes: np.ndarray, pairs) -> list[float]:
    return [float(pairwise_iou(patch_boxes[t:t + 1], np.clip(pred_boxes[p:p + 1], 0, 1))[0, 0])
            for t, p in pairs]


@torch.no_grad()
def heldout_patch_iou(model: SEDT, data: FeatureSet, cfg: PretrainConfig, seed: int = 12345,
                      batch_size: int = 32) -> float:
    """Mean matched IOU on held-out clips with crops fixed by ``seed``."""
    was_training = model.training
    model.eval()
    rng = np.random.default_rng(seed)
    ious = []
    for start in range(0, len(data), batch_size):
        diag = pretrain_step(model, data.features[start:start + batch_size], cfg, rng)
        ious.append((diag["matched_iou"], min(batch_size, len(data) - start)))
    if was_training:
        train_mode(model)
    return float(sum(v * n for v, n in ious) / sum(n for _, n in ious))


def build_pretrain_model(config: ModelConfig, backbone_state: Optional[dict] = None, seed: int = 0) -> SEDT:
    torch.manual_seed(seed)
    model = SEDT(config, pretrain=True)
    if backbone_state is not None:
        missing = model.load_state_dict(backbone_state, strict=False)
        bad = [k for k in missing.unexpected_keys]
        if bad:
            raise ValueError(f"unexpected backbone keys: {bad[:3]}")
    freeze_backbone(model)
    return model


def run_pretraining(model: SEDT, train: FeatureSet, cfg: PretrainConfig,
                    heldout: Optional[FeatureSet] = None) -> list[dict]:
    """Epoch loop of the pretext task; returns per-epoch JSON log rows.

    Row 0 records the held-out IOU of the untrained detector.
    """
    freeze_backbone(model)
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    log = []
    if heldout is not None and len(heldout):
        log.append({"epoch": 0, "heldout_patch_iou": heldout_patch_iou(model, heldout, cfg)})
    w = cfg.loss
    for epoch in range(1, cfg.epochs + 1):
        if cfg.lr_drop_epoch and epoch == cfg.lr_drop_epoch + 1:
            for group in opt.param_groups:
                group["lr"] *= 0.1
        train_mode(model)
        sums = {"c": 0.0, "loc": 0.0, "rec": 0.0, "total": 0.0, "matched_iou": 0.0}
        n = 0
        for idx in iterate_batches(len(train), cfg.batch_size, gen):
            diag = pretrain_step(model, train.features[idx], cfg, rng, opt)
            for k in sums:
                sums[k] += diag[k]
            n += 1
        row = {"epoch": epoch}
        for k in ("total", "c", "loc", "rec"):
            row[f"loss_{k}"] = sums[k] / max(n, 1)
        row["train_patch_iou"] = sums["matched_iou"] / max(n, 1)
        row["loss_weighted_sum"] = w.lambda_c * row["loss_c"] + w.lambda_loc * row["loss_loc"] + w.lambda_rec * row["loss_rec"]
        if heldout is not None and len(heldout):
            row["heldout_patch_iou"] = heldout_patch_iou(model, heldout, cfg)
        logger.info("pretrain %s", row)
        log.append(row)
    return log
