"""Training experiments behind the end-to-end acceptance criteria.

Budgets are sized for a single CPU core. Every run is seeded; splits use
disjoint synthesis seeds so no clip is shared between roles unless stated.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from sedt.corpus import compute_stats, default_spec, synth_clip
from sedt.data import FeatureSet, featurize
from sedt.finetuning import FinetuneConfig, TransferPolicy, evaluate, finetune, transfer_weights
from sedt.losses import LossWeights
from sedt.network import SEDT, ModelConfig
from sedt.pretraining import (BackboneConfig, PretrainConfig, build_pretrain_model, heldout_patch_iou,
                              pretrain_backbone, run_pretraining)

logger = logging.getLogger("acceptance")

MODEL = ModelConfig(d_model=128, n_encoder_blocks=3, n_decoder_blocks=3, n_queries=10, n_patches=2)

# synthesis seed bases per role
POOL_BASE = 0            # 2000 strong clips; also reused, label-free, as the unlabeled pretext pool
FEW_BASE = 5_000_000     # 200 strong fine-tuning clips
VAL_BASE = 9_000_000     # held-out strong clips
PATCH_VAL_BASE = 7_000_000  # held-out clips for the pretext diagnostic


@dataclass
class Budget:
    """Training budgets; the defaults are what the acceptance suite runs."""

    e2e_epochs: int = 20
    e2e: FinetuneConfig = field(
        default_factory=lambda: FinetuneConfig(lr=5e-4, backbone_lr=5e-4, lr_drop_epoch=15))
    few_epochs: int = 60
    few: FinetuneConfig = field(
        default_factory=lambda: FinetuneConfig(lr=5e-4, backbone_lr=5e-4, batch_size=8, lr_drop_epoch=45))
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pretrain: PretrainConfig = field(default_factory=lambda: PretrainConfig(epochs=6, lr=5e-4))
    seeds: tuple[int, ...] = (0, 1, 2)
    n_pool: int = 2000
    n_few: int = 200
    n_val: int = 200
    n_patch_val: int = 100


def synth_records(n: int, base: int, kind: str = "strong"):
    spec = default_spec()
    return [synth_clip(spec, base + i, f"{kind}_{base + i}", kind)[0] for i in range(n)]


class Bench:
    """Featurized splits sharing one set of normalization statistics (fit on the pool)."""

    def __init__(self, budget: Budget):
        self.budget = budget
        spec = default_spec()
        self.class_names = spec.class_names
        t0 = time.time()
        pool = synth_records(budget.n_pool, POOL_BASE)
        pool_specs = featurize(spec, pool)
        self.stats = compute_stats(pool_specs)
        self.pool = FeatureSet.build(pool, pool_specs, self.stats, spec.class_names)
        del pool_specs
        self.unlabeled = FeatureSet(
            [r.with_kind("unlabeled") for r in self.pool.records], self.pool.features,
            self.class_names, self.pool.frames_per_sec)
        self.few = self._build(synth_records(budget.n_few, FEW_BASE))
        self.val = self._build(synth_records(budget.n_val, VAL_BASE))
        self.patch_val = self._build(synth_records(budget.n_patch_val, PATCH_VAL_BASE, "unlabeled"))
        self.featurize_sec = time.time() - t0

    def _build(self, records):
        return FeatureSet.build(records, featurize(default_spec(), records), self.stats, self.class_names)


def train_e2e(bench: Bench, seed: int = 0) -> dict:
    """From-scratch SEDT on the 2000-clip strong pool; wall time covers training and evaluation."""
    b = bench.budget
    t0 = time.time()
    torch.manual_seed(seed)
    model = SEDT(MODEL)
    cfg = dataclasses.replace(b.e2e, epochs=b.e2e_epochs, seed=seed, eval_every=b.e2e_epochs)
    log = finetune(model, bench.pool, cfg, bench.val)
    report = evaluate(model, bench.val)
    return {"eb_f1": report["event_based"]["macro_f1"], "sb_f1": report["segment_based"]["macro_f1"],
            "at_f1": report["tagging"]["macro_f1"], "train_sec": time.time() - t0, "log": log}


def tagging_backbone(bench: Bench, seed: int = 0) -> tuple[dict, list]:
    """Backbone tagging-pretrained on the clip tags of the 200 fine-tuning clips (no extra labels)."""
    cfg = dataclasses.replace(bench.budget.backbone, seed=seed)
    return pretrain_backbone(bench.few, MODEL, cfg, bench.val)


ARMS = {
    "full": {},
    "no_rec": {"loss": LossWeights(lambda_rec=0.0)},
    "no_cls": {"loss": LossWeights(lambda_c=0.0)},
    "fixed_2.5s": {"length_range": (0.25, 0.25)},
}


def pretrain_arm(bench: Bench, backbone_state: dict, arm: str, seed: int = 0) -> dict:
    cfg = dataclasses.replace(bench.budget.pretrain, seed=seed, **ARMS[arm])
    model = build_pretrain_model(MODEL, backbone_state, seed=seed)
    frozen = {k: v.clone() for k, v in model.backbone.state_dict().items()}
    t0 = time.time()
    log = run_pretraining(model, bench.unlabeled, cfg, bench.patch_val)
    backbone_unchanged = all(torch.equal(v, frozen[k]) for k, v in model.backbone.state_dict().items())
    # the untrained diagnostic is the epoch-0 row; re-measure the final model on the same crops
    return {"state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
            "log": log, "untrained_iou": log[0]["heldout_patch_iou"],
            "final_iou": heldout_patch_iou(model, bench.patch_val, cfg),
            "backbone_unchanged": backbone_unchanged, "train_sec": time.time() - t0}


def finetune_few(bench: Bench, seed: int, init_state: dict | None = None,
                 policy: TransferPolicy = TransferPolicy()) -> dict:
    b = bench.budget
    if init_state is None:
        torch.manual_seed(seed)
        model = SEDT(MODEL)
    else:
        model = transfer_weights(init_state, MODEL, policy, seed=seed)
    cfg = dataclasses.replace(b.few, epochs=b.few_epochs, seed=seed, eval_every=b.few_epochs)
    t0 = time.time()
    log = finetune(model, bench.few, cfg, bench.val)
    report = evaluate(model, bench.val)
    return {"eb_f1": report["event_based"]["macro_f1"], "sb_f1": report["segment_based"]["macro_f1"],
            "at_f1": report["tagging"]["macro_f1"], "train_sec": time.time() - t0, "log": log}


def mean(values) -> float:
    return float(np.mean(list(values)))
