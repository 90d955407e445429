"""Weight transfer, supervised fine-tuning and event-level inference."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .assignment import MatchWeights, iou_1d, match, to_interval
from .data import FeatureSet, iterate_batches
from .losses import LossWeights, detection_loss, tagging_loss
from .metrics import event_based_f1, segment_based_f1, tagging_f1
from .network import SEDT, ModelConfig, param_group

logger = logging.getLogger(__name__)

COPY_GROUPS = ("backbone", "encoder", "decoder", "event_queries", "boundary_head")
REINIT_GROUPS = ("class_head", "audio_query", "tagging_head")


class TransferError(RuntimeError):
    pass


@dataclass(frozen=True)
class TransferPolicy:
    copy: frozenset = frozenset(COPY_GROUPS)
    reinitialize: frozenset = frozenset(REINIT_GROUPS)

    def __post_init__(self):
        object.__setattr__(self, "copy", frozenset(self.copy))
        object.__setattr__(self, "reinitialize", frozenset(self.reinitialize))
        if self.copy & self.reinitialize:
            raise ValueError(f"groups both copied and reinitialized: {sorted(self.copy & self.reinitialize)}")

    @classmethod
    def only(cls, *groups: str) -> "TransferPolicy":
        all_groups = set(COPY_GROUPS) | set(REINIT_GROUPS)
        return cls(frozenset(groups), frozenset(all_groups - set(groups)))

    def is_default(self) -> bool:
        return self.copy == frozenset(COPY_GROUPS) and self.reinitialize == frozenset(REINIT_GROUPS)

    def to_json(self) -> dict:
        return {"copy": sorted(self.copy), "reinitialize": sorted(self.reinitialize)}


def transfer_weights(state_dict: dict, config: ModelConfig, policy: TransferPolicy = TransferPolicy(),
                     seed: int = 0) -> SEDT:
    """Build a fine-tuning model: copied groups from ``state_dict``, the rest freshly drawn."""
    model_groups = {param_group(n) for n, _ in SEDT(config).named_parameters()}
    missing_cover = model_groups - policy.copy - policy.reinitialize
    if missing_cover:
        raise TransferError(f"policy does not cover groups {sorted(missing_cover)}")
    torch.manual_seed(seed)
    model = SEDT(config, pretrain=False)
    own = model.state_dict()
    present = {param_group(k) for k in state_dict}
    absent = sorted(policy.copy - present)
    if absent:
        raise TransferError(f"checkpoint lacks copied groups {absent}")
    for name, value in state_dict.items():
        group = param_group(name)
        if group not in policy.copy:
            continue
        if name not in own:
            raise TransferError(f"group {group!r}: parameter {name!r} not in the target model")
        if own[name].shape != value.shape:
            raise TransferError(
                f"group {group!r}: shape mismatch for {name!r}: "
                f"{tuple(value.shape)} vs {tuple(own[name].shape)}")
        own[name] = value.clone()
    model.load_state_dict(own)
    return model


@dataclass
class FinetuneConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-4
    backbone_lr: float = 1e-5
    weight_decay: float = 1e-4
    grad_clip: float = 0.1
    multiplicity: int = 1
    loss: LossWeights = field(default_factory=LossWeights)
    matcher: MatchWeights = field(default_factory=MatchWeights)
    seed: int = 0
    eval_every: int = 1
    lr_drop_epoch: int = 0  # multiply learning rates by 0.1 after this epoch; 0 disables


@dataclass
class InferenceConfig:
    tau_event: float = 0.5
    tau_tag: float = 0.5
    nms_iou: float = 0.5
    fusion: str = "filter"  # filter | rescale | none

    def __post_init__(self):
        if self.fusion not in ("filter", "rescale", "none"):
            raise ValueError(f"unknown fusion mode {self.fusion!r}")


def make_optimizer(model: SEDT, cfg: FinetuneConfig) -> torch.optim.Optimizer:
    backbone = [p for n, p in model.named_parameters() if n.startswith("backbone.") and p.requires_grad]
    rest = [p for n, p in model.named_parameters() if not n.startswith("backbone.") and p.requires_grad]
    groups = [{"params": rest, "lr": cfg.lr}]
    if backbone:
        groups.append({"params": backbone, "lr": cfg.backbone_lr})
    return torch.optim.AdamW(groups, lr=cfg.lr, weight_decay=cfg.weight_decay)


def batch_loss(model: SEDT, data: FeatureSet, idx: Sequence[int], cfg: FinetuneConfig) -> dict[str, torch.Tensor]:
    """Mean per-clip loss over a batch; weak clips only contribute tagging."""
    out = model(data.features[idx])
    probs = out.class_probs.detach().double().numpy()
    boxes = out.boundaries.detach().double().numpy()
    totals: dict[str, torch.Tensor] = {}
    for b, i in enumerate(idx):
        labels, tboxes, tags = data.targets(i)
        kind = data.records[i].annotation_kind
        if kind == "strong":
            m = match(tboxes.numpy(), labels.numpy(), probs[b], boxes[b], cfg.matcher, cfg.multiplicity)
            parts = detection_loss(out.class_logits[b], out.boundaries[b], out.tag_probs[b], labels,
                                   tboxes, tags, m.pairs, cfg.loss, model.background_index)
        elif kind == "weak":
            at = tagging_loss(out.tag_probs[b], tags)
            parts = {"at": at, "total": cfg.loss.lambda_at * at}
        else:
            continue
        for k, v in parts.items():
            totals[k] = totals.get(k, 0.0) + v / len(idx)
    return totals


def finetune(model: SEDT, train: FeatureSet, cfg: FinetuneConfig, val: Optional[FeatureSet] = None,
             infer_cfg: InferenceConfig = InferenceConfig(), log: Optional[list] = None) -> list[dict]:
    """Train ``model`` in place; returns per-epoch log rows."""
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    # a zero-weighted tagging branch must not drift through weight decay either
    if cfg.loss.lambda_at == 0:
        for p in list(model.tagging_head.parameters()) + [model.audio_query]:
            p.requires_grad_(False)
    opt = make_optimizer(model, cfg)
    params = [p for p in model.parameters() if p.requires_grad]
    log = [] if log is None else log
    for epoch in range(1, cfg.epochs + 1):
        if cfg.lr_drop_epoch and epoch == cfg.lr_drop_epoch + 1:
            for group in opt.param_groups:
                group["lr"] *= 0.1
        model.train()
        sums: dict[str, float] = {}
        n_batches = 0
        for idx in iterate_batches(len(train), cfg.batch_size, gen):
            parts = batch_loss(model, train, idx, cfg)
            if "total" not in parts:
                continue
            opt.zero_grad()
            parts["total"].backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach())
            n_batches += 1
        row = {"epoch": epoch, **{f"loss_{k}": v / max(n_batches, 1) for k, v in sorted(sums.items())}}
        if val is not None and len(val) and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            report = evaluate(model, val, infer_cfg)
            row.update(val_eb_f1=report["event_based"]["macro_f1"],
                       val_sb_f1=report["segment_based"]["macro_f1"],
                       val_at_f1=report["tagging"]["macro_f1"])
        logger.info("finetune %s", row)
        log.append(row)
    return log


@dataclass
class DetectedEvent:
    label: str
    onset_sec: float
    offset_sec: float
    score: float


def decode_predictions(class_probs: np.ndarray, boundaries: np.ndarray, tag_probs: np.ndarray,
                       class_names: Sequence[str], duration_sec: float,
                       cfg: InferenceConfig = InferenceConfig()):
    """Turn one clip's head outputs into events and tags.

    Steps: drop background/low-confidence slots, fuse with clip tags, suppress
    same-class overlaps (IOU > ``nms_iou``) in score order, convert to seconds.
    """
    n_cls = len(class_names)
    tags = [(class_names[c], float(tag_probs[c])) for c in range(n_cls) if tag_probs[c] >= cfg.tau_tag]
    cands = []
    for slot in range(class_probs.shape[0]):
        c = int(np.argmax(class_probs[slot]))
        if c >= n_cls:
            continue
        score = float(class_probs[slot, c])
        if cfg.fusion == "filter" and tag_probs[c] < cfg.tau_tag:
            continue
        if cfg.fusion == "rescale":
            score *= float(tag_probs[c])
        if score < cfg.tau_event:
            continue
        cands.append((score, slot, c, to_interval(*boundaries[slot])))
    cands.sort(key=lambda x: (-x[0], x[1]))
    kept = []
    for score, slot, c, iv in cands:
        if iv.length <= 0:
            continue
        if any(k[2] == c and iou_1d(iv, k[3]) > cfg.nms_iou for k in kept):
            continue
        kept.append((score, slot, c, iv))
    events = [DetectedEvent(class_names[c], iv.onset * duration_sec, iv.offset * duration_sec, score)
              for score, slot, c, iv in kept]
    events.sort(key=lambda e: (e.onset_sec, e.offset_sec, e.label))
    return events, tags


@torch.no_grad()
def infer(model: SEDT, data: FeatureSet, cfg: InferenceConfig = InferenceConfig(),
          batch_size: int = 32) -> dict[str, dict]:
    """Predict events and tags for every clip; keyed by clip id."""
    model.eval()
    out = {}
    for start in range(0, len(data), batch_size):
        idx = list(range(start, min(start + batch_size, len(data))))
        pred = model(data.features[idx])
        probs = pred.class_probs.double().numpy()
        boxes = pred.boundaries.double().numpy()
        tags = pred.tag_probs.double().numpy()
        for b, i in enumerate(idx):
            rec = data.records[i]
            events, tag_list = decode_predictions(probs[b], boxes[b], tags[b], data.class_names,
                                                  rec.duration_sec, cfg)
            out[rec.clip_id] = {"events": events, "tags": tag_list}
    return out


def score_predictions(records, predictions: dict, class_names: Sequence[str],
                      collar_sec: float = 0.2, segment_sec: float = 1.0) -> dict:
    refs = {r.clip_id: [(e.label, e.onset_sec, e.offset_sec) for e in r.events] for r in records}
    ref_tags = {r.clip_id: set(r.tags) for r in records}
    hyp = {cid: [(e.label, e.onset_sec, e.offset_sec) for e in p["events"]] for cid, p in predictions.items()}
    hyp_tags = {cid: {t for t, _ in p["tags"]} for cid, p in predictions.items()}
    durations = {r.clip_id: r.duration_sec for r in records}
    return {
        "event_based": event_based_f1(refs, hyp, collar_sec, classes=class_names).to_json(),
        "segment_based": segment_based_f1(refs, hyp, durations, segment_sec, classes=class_names).to_json(),
        "tagging": tagging_f1(ref_tags, hyp_tags, classes=class_names).to_json(),
    }


def evaluate(model: SEDT, data: FeatureSet, cfg: InferenceConfig = InferenceConfig(),
             collar_sec: float = 0.2, segment_sec: float = 1.0) -> dict:
    return score_predictions(data.records, infer(model, data, cfg), data.class_names, collar_sec, segment_sec)
