"""Command line entry point: ``sedt {synth,pretrain-backbone,pretrain,finetune,infer,evaluate}``.

All commands share ``--config``, ``--seed``, ``--out``, ``--init`` and
``--epochs``. Outputs land under the run directory::

    <out>/manifests/{strong,weak,unlabeled,val}.jsonl
    <out>/norm_stats.json
    <out>/<command>/resolved_config.json, log.json, checkpoints, reports
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch

from .config import RunConfig, load_config, save_config
from .corpus import ClipRecord, NormStats, compute_stats, load_manifest, save_manifest, synth_clip
from .data import FeatureSet, featurize
from .finetuning import (DetectedEvent, TransferError, TransferPolicy, finetune, infer,
                         transfer_weights)
from .metrics import event_based_f1, segment_based_f1, tagging_f1
from .network import SEDT, CheckpointError, ConfigError, ModelConfig, load_checkpoint, save_checkpoint, save_state
from .pretraining import build_pretrain_model, pretrain_backbone, run_pretraining

logger = logging.getLogger("sedt")

SPLITS = ("strong", "weak", "unlabeled", "val")
SPLIT_OFFSET = {"strong": 0, "weak": 1_000_000, "unlabeled": 2_000_000, "val": 3_000_000}
SEED_STRIDE = 10_000_000


class CommandError(RuntimeError):
    pass


def clip_seed(run_seed: int, split: str, index: int) -> int:
    return run_seed * SEED_STRIDE + SPLIT_OFFSET[split] + index


def _run_dir(cfg: RunConfig, command: str) -> Path:
    d = Path(cfg.out_dir) / command
    d.mkdir(parents=True, exist_ok=True)
    save_config(cfg, d / "resolved_config.json")
    return d


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def _manifest(cfg: RunConfig, split: str) -> list[ClipRecord]:
    path = Path(cfg.out_dir) / "manifests" / f"{split}.jsonl"
    if not path.exists():
        raise CommandError(f"{path} not found; run `sedt synth` first")
    return load_manifest(path)


def _stats(cfg: RunConfig) -> NormStats:
    path = Path(cfg.out_dir) / "norm_stats.json"
    if not path.exists():
        raise CommandError(f"{path} not found; run `sedt synth` first")
    return NormStats.from_json(json.loads(path.read_text()))


def _features(cfg: RunConfig, records: Sequence[ClipRecord], stats: NormStats) -> FeatureSet:
    spec = cfg.data.synth_spec()
    return FeatureSet.build(records, featurize(spec, records, cfg.data.feature_params), stats, spec.class_names)


def _meta(cfg: RunConfig, kind: str, stats: NormStats, **extra) -> dict:
    return {"kind": kind, "class_names": cfg.data.synth_spec().class_names,
            "norm_stats": stats.to_json(), "feature_params": dataclasses.asdict(cfg.data.feature_params),
            **extra}


def cmd_synth(cfg: RunConfig) -> dict:
    spec = cfg.data.synth_spec()
    counts = {"strong": cfg.data.n_strong, "weak": cfg.data.n_weak,
              "unlabeled": cfg.data.n_unlabeled, "val": cfg.data.n_val}
    out = Path(cfg.out_dir)
    _run_dir(cfg, "synth")
    train_specs = []
    for split in SPLITS:
        kind = "strong" if split == "val" else split
        records = []
        for i in range(counts[split]):
            rec, wave = synth_clip(spec, clip_seed(cfg.seed, split, i), f"{split}_{i:06d}", kind)
            records.append(rec)
        save_manifest(records, out / "manifests" / f"{split}.jsonl")
        if split != "val":
            train_specs.extend(featurize(spec, records, cfg.data.feature_params))
        logger.info("synth %s: %d clips", split, len(records))
    if not train_specs:
        raise CommandError("no training clips: cannot compute normalization statistics")
    stats = compute_stats(train_specs)
    _write_json(out / "norm_stats.json", stats.to_json())
    return counts


def cmd_pretrain_backbone(cfg: RunConfig) -> Path:
    stats = _stats(cfg)
    weak = _manifest(cfg, "weak")
    if not weak:
        raise CommandError("backbone pretraining needs at least one weak clip")
    d = _run_dir(cfg, "backbone")
    mcfg = cfg.model_config()
    bcfg = dataclasses.replace(cfg.pretrain.backbone, seed=cfg.seed)
    state, log = pretrain_backbone(_features(cfg, weak, stats), mcfg, bcfg,
                                   _features(cfg, _manifest(cfg, "val"), stats))
    path = d / "backbone.pt"
    save_state(path, mcfg, state, pretrain=False, meta=_meta(cfg, "backbone", stats))
    _write_json(d / "log.json", log)
    return path


def cmd_pretrain(cfg: RunConfig, init: Optional[str] = None, force_transfer: bool = False) -> Path:
    stats = _stats(cfg)
    d = _run_dir(cfg, "pretrain")
    mcfg = cfg.model_config()
    init = init or str(Path(cfg.out_dir) / "backbone" / "backbone.pt")
    backbone_state = None
    if init != "scratch":
        ckpt = load_checkpoint(init, mcfg, force_transfer)
        backbone_state = {k: v for k, v in ckpt["state_dict"].items() if k.startswith("backbone.")}
    model = build_pretrain_model(mcfg, backbone_state, seed=cfg.seed)
    pcfg = dataclasses.replace(cfg.pretrain.patch, seed=cfg.seed)
    unlabeled = _manifest(cfg, "unlabeled")
    if not unlabeled:
        raise CommandError("pretraining needs unlabeled clips")
    log = run_pretraining(model, _features(cfg, unlabeled, stats), pcfg,
                          _features(cfg, _manifest(cfg, "val"), stats))
    path = d / "sp_sedt.pt"
    save_checkpoint(model, path, _meta(cfg, "sp-sedt", stats, init=init))
    _write_json(d / "log.json", log)
    return path


def initial_model(cfg: RunConfig, init: str, seed: int, force_transfer: bool = False) -> tuple[SEDT, dict]:
    """Fresh model (``init == "scratch"``) or a transfer from a checkpoint."""
    mcfg = cfg.model_config()
    if init == "scratch":
        torch.manual_seed(seed)
        return SEDT(mcfg), {"init": "scratch"}
    ckpt = load_checkpoint(init, mcfg, force_transfer)
    kind = ckpt["meta"].get("kind")
    policy = TransferPolicy.only("backbone") if kind == "backbone" else TransferPolicy()
    model = transfer_weights(ckpt["state_dict"], mcfg, policy, seed=seed)
    info = {"init": init, "init_kind": kind, "transfer_policy": policy.to_json(),
            "ablation": not policy.is_default()}
    return model, info


def cmd_finetune(cfg: RunConfig, init: str = "scratch", force_transfer: bool = False) -> Path:
    stats = _stats(cfg)
    d = _run_dir(cfg, "finetune")
    model, info = initial_model(cfg, init, cfg.seed, force_transfer)
    train = _features(cfg, _manifest(cfg, "strong") + _manifest(cfg, "weak"), stats)
    fcfg = dataclasses.replace(cfg.finetune, seed=cfg.seed)
    log = finetune(model, train, fcfg, _features(cfg, _manifest(cfg, "val"), stats), cfg.eval.inference)
    path = d / "sedt.pt"
    save_checkpoint(model, path, _meta(cfg, "sedt", stats, **info))
    _write_json(d / "log.json", {"init": info, "epochs": log})
    return path


def predictions_to_jsonl(predictions: dict, path: Path) -> None:
    with path.open("w") as fh:
        for cid in sorted(predictions):
            p = predictions[cid]
            fh.write(json.dumps({
                "clip_id": cid,
                "events": [{"label": e.label, "onset_sec": e.onset_sec, "offset_sec": e.offset_sec,
                            "score": e.score} for e in p["events"]],
                "tags": [{"label": t, "score": s} for t, s in p["tags"]],
            }, sort_keys=True) + "\n")


def predictions_from_jsonl(path: Path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        out[obj["clip_id"]] = {
            "events": [DetectedEvent(e["label"], e["onset_sec"], e["offset_sec"], e["score"])
                       for e in obj["events"]],
            "tags": [(t["label"], t["score"]) for t in obj["tags"]],
        }
    return out


def cmd_infer(cfg: RunConfig, checkpoint: Optional[str] = None, manifest: Optional[str] = None) -> Path:
    checkpoint = checkpoint or str(Path(cfg.out_dir) / "finetune" / "sedt.pt")
    ckpt = load_checkpoint(checkpoint, cfg.model_config())
    if ckpt["pretrain"]:
        raise CommandError("inference needs a fine-tuned checkpoint, not a pretraining one")
    model = SEDT(ModelConfig.from_json(ckpt["config"]))
    model.load_state_dict(ckpt["state_dict"])
    stats = NormStats.from_json(ckpt["meta"]["norm_stats"])
    records = load_manifest(manifest) if manifest else _manifest(cfg, "val")
    d = _run_dir(cfg, "infer")
    preds = infer(model, _features(cfg, records, stats), cfg.eval.inference)
    path = d / "predictions.jsonl"
    predictions_to_jsonl(preds, path)
    return path


def cmd_evaluate(cfg: RunConfig, predictions: Optional[str] = None, manifest: Optional[str] = None) -> dict:
    predictions = predictions or str(Path(cfg.out_dir) / "infer" / "predictions.jsonl")
    records = load_manifest(manifest) if manifest else _manifest(cfg, "val")
    preds = predictions_from_jsonl(Path(predictions))
    classes = cfg.data.synth_spec().class_names
    refs = {r.clip_id: [(e.label, e.onset_sec, e.offset_sec) for e in r.events] for r in records}
    hyp = {cid: [(e.label, e.onset_sec, e.offset_sec) for e in p["events"]] for cid, p in preds.items()}
    report = {
        "event_based": event_based_f1(refs, hyp, cfg.eval.collar_sec, cfg.eval.offset_fraction,
                                      classes=classes).to_json(),
        "segment_based": segment_based_f1(refs, hyp, {r.clip_id: r.duration_sec for r in records},
                                          cfg.eval.segment_sec, classes=classes).to_json(),
        "tagging": tagging_f1({r.clip_id: set(r.tags) for r in records},
                              {cid: {t for t, _ in p["tags"]} for cid, p in preds.items()},
                              classes=classes).to_json(),
    }
    d = _run_dir(cfg, "evaluate")
    _write_json(d / "report.json", report)
    return report


COMMANDS = ("synth", "pretrain-backbone", "pretrain", "finetune", "infer", "evaluate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sedt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="run directory (overrides out_dir)")
        p.add_argument("--init", help="'scratch' or a checkpoint path")
        p.add_argument("--epochs", type=int)
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "synth":
            p.add_argument("--n-strong", type=int)
            p.add_argument("--n-weak", type=int)
            p.add_argument("--n-unlabeled", type=int)
            p.add_argument("--n-val", type=int)
        if name in ("pretrain", "finetune"):
            p.add_argument("--force-transfer", action="store_true",
                           help="load a checkpoint whose model config hash differs")
        if name in ("infer", "evaluate"):
            p.add_argument("--manifest")
        if name == "infer":
            p.add_argument("--checkpoint")
        if name == "evaluate":
            p.add_argument("--predictions")
    return parser


def _overrides(args) -> dict:
    ov = {}
    if args.seed is not None:
        ov["seed"] = args.seed
    if args.out is not None:
        ov["out_dir"] = args.out
    if args.epochs is not None:
        key = {"pretrain-backbone": "pretrain.backbone.epochs", "pretrain": "pretrain.patch.epochs",
               "finetune": "finetune.epochs"}.get(args.command)
        if key is None:
            raise ConfigError(f"--epochs does not apply to {args.command}")
        ov[key] = args.epochs
    for flag in ("n_strong", "n_weak", "n_unlabeled", "n_val"):
        if getattr(args, flag, None) is not None:
            ov[f"data.{flag}"] = getattr(args, flag)
    return ov


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = load_config(args.config, _overrides(args))
        if args.command == "synth":
            counts = cmd_synth(cfg)
            print(json.dumps(counts))
        elif args.command == "pretrain-backbone":
            print(cmd_pretrain_backbone(cfg))
        elif args.command == "pretrain":
            print(cmd_pretrain(cfg, args.init, args.force_transfer))
        elif args.command == "finetune":
            print(cmd_finetune(cfg, args.init or "scratch", args.force_transfer))
        elif args.command == "infer":
            print(cmd_infer(cfg, args.checkpoint, args.manifest))
        elif args.command == "evaluate":
            report = cmd_evaluate(cfg, args.predictions, args.manifest)
            print(json.dumps({k: v["macro_f1"] for k, v in report.items()}))
    except (ConfigError, CommandError, CheckpointError, TransferError, ValueError, FileNotFoundError) as exc:
        print(f"sedt {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
