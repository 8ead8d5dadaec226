"""Command line entry point: ``onnseg {prepare,train,eval,predict,gradcheck}``.

All verbs except ``gradcheck`` read a JSON RunConfig. Flags override the
matching config keys. Every artifact lands under the run's output
directory::

    config.json            fully resolved config (every verb)
    split.json folds.json  patient partitions (prepare)
    summary.json           patients, slices, lesion-pixel fraction (prepare)
    cache/<mode>/          per-patient .npy slice stacks + index.json (prepare)
    train_log.csv          one row per epoch (train)
    best.ckpt last.ckpt    checkpoints (train)
    train_patients.json    ids the model saw (train)
    metrics_<split>.json   both aggregations (eval)
    per_slice_<split>.csv  one row per slice (eval)
    predictions/           <patient>_z<zzz>_{prob,mask}.png (predict)
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import gradsuite
from .checkpoint import Checkpoint, DigestMismatchError, capture, load_checkpoint, restore, save_checkpoint
from .config import RunConfig
from .data import (SliceSample, build_samples, kfold, load_manifest, patient_split,
                   records_from_manifest, synth_dataset)
from .data.preprocess import MODALITY_CHANNELS
from .data.splits import SplitPlan
from .errors import ConfigurationError, LeakageError, OnnSegError, ValidationError
from .nifti import write_png_gray
from .nn import PRESETS, SegModel, init_params
from .objectives import format_table
from .train import evaluate, predict_probs, train

SPLITS = ("train", "val", "test")


# -- helpers -------------------------------------------------------------------

def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def load_records(cfg: RunConfig):
    if cfg.synthetic is not None:
        return synth_dataset(cfg.synthetic_spec())
    return records_from_manifest(load_manifest(cfg.manifest), cfg.modality_mode)


def _pipeline_doc(cfg: RunConfig) -> dict:
    p = cfg.pipeline()
    return {"mode": p.mode, "size": p.size, "normalization": p.normalization,
            "clahe": asdict(p.clahe), "source": cfg.manifest or cfg.synthetic_spec().to_dict()}


def cache_dir(cfg: RunConfig) -> Path:
    return cfg.out / "cache" / cfg.modality_mode


def load_cache(cfg: RunConfig, ids: Sequence[str]) -> List[SliceSample]:
    """Slices for ``ids`` in the given order, verified against the index."""
    root = cache_dir(cfg)
    index_path = root / "index.json"
    if not index_path.exists():
        raise ConfigurationError(f"no slice cache at {root}; run 'onnseg prepare' first")
    index = json.loads(index_path.read_text())
    if index["pipeline"] != json.loads(json.dumps(_pipeline_doc(cfg))):
        raise ConfigurationError(f"slice cache at {root} was built with other preprocessing "
                                 "settings; re-run 'onnseg prepare'")
    out = []
    for pid in ids:
        entry = index["patients"].get(pid)
        if entry is None:
            raise ValidationError(f"patient {pid} is not in the slice cache")
        arrays = {}
        for key in ("image", "mask"):
            path = root / entry[key]
            if _sha256(path) != entry[f"{key}_sha256"]:
                raise ValidationError(f"cache file {path} does not match its recorded digest")
            arrays[key] = np.load(path)
        for z, (img, m) in enumerate(zip(arrays["image"], arrays["mask"])):
            out.append(SliceSample(pid, z, img[None], m[None]))
    return out


def _load_split(cfg: RunConfig) -> SplitPlan:
    path = cfg.out / "split.json"
    if not path.exists():
        raise ConfigurationError(f"{path} not found; run 'onnseg prepare' first")
    return SplitPlan.load(path)


def _split_ids(plan: SplitPlan, split: str) -> List[str]:
    if split == "all":
        return plan.train + plan.val + plan.test
    return list(getattr(plan, split))


def _load_model_checkpoint(cfg: RunConfig, path: Optional[str]):
    """Load a checkpoint and bind it to a model built from ``cfg``.

    The modality recorded in the checkpoint is checked before the config
    digest so a channel mismatch gets the more specific message.
    """
    path = Path(path) if path else cfg.out / "best.ckpt"
    if not path.exists():
        raise ConfigurationError(f"checkpoint {path} does not exist")
    ck = load_checkpoint(path)
    saved_mode = ck.meta.get("modality_mode")
    if saved_mode is not None and saved_mode != cfg.modality_mode:
        raise ConfigurationError(
            f"checkpoint {path} expects modality_mode {saved_mode!r} "
            f"({MODALITY_CHANNELS[saved_mode]} channels) but the run uses {cfg.modality_mode!r} "
            f"({MODALITY_CHANNELS[cfg.modality_mode]} channels)")
    mcfg = cfg.model()
    if ck.config_digest != mcfg.digest():
        raise DigestMismatchError(
            f"checkpoint {path} was written for a different model config "
            f"({ck.config_digest.hex()[:16]}... vs {mcfg.digest().hex()[:16]}...)")
    store = init_params(mcfg, 0)
    restore(ck, store)
    store.eval()
    return ck, SegModel(mcfg, store), path


# -- verbs ---------------------------------------------------------------------

def cmd_prepare(cfg: RunConfig) -> int:
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out)
    records = load_records(cfg)
    ids = [r.patient_id for r in records]
    plan = patient_split(ids, cfg.split_ratios, cfg.split_seed)
    plan.save(out / "split.json")
    (out / "folds.json").write_text(kfold(ids, cfg.folds, cfg.split_seed).to_json())

    root = cache_dir(cfg)
    root.mkdir(parents=True, exist_ok=True)
    samples = build_samples(records, cfg.pipeline())
    by_patient: Dict[str, List[SliceSample]] = {}
    for s in samples:
        by_patient.setdefault(s.patient_id, []).append(s)
    index = {"pipeline": _pipeline_doc(cfg), "patients": {}}
    lesion_pixels = total_pixels = 0
    for pid, group in by_patient.items():
        image = np.concatenate([s.image for s in group])
        mask = np.concatenate([s.mask for s in group])
        entry = {"slices": len(group)}
        for key, arr in (("image", image), ("mask", mask)):
            path = root / f"{pid}_{key}.npy"
            np.save(path, arr)
            entry[key] = path.name
            entry[f"{key}_sha256"] = _sha256(path)
        index["patients"][pid] = entry
        lesion_pixels += int(mask.sum())
        total_pixels += mask.size
    _write_json(root / "index.json", index)

    summary = {"patients": len(by_patient), "slices": len(samples),
               "lesion_pixel_fraction": lesion_pixels / max(total_pixels, 1),
               "split_sizes": {k: len(getattr(plan, k)) for k in SPLITS},
               "modality_mode": cfg.modality_mode, "image_size": cfg.size}
    _write_json(out / "summary.json", summary)
    print(f"patients: {summary['patients']}  slices: {summary['slices']}  "
          f"lesion-pixel fraction: {summary['lesion_pixel_fraction']:.4f}")
    print("split train/val/test: " + "/".join(str(summary["split_sizes"][k]) for k in SPLITS))
    return 0


def cmd_train(cfg: RunConfig) -> int:
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out)
    plan = _load_split(cfg)
    pcfg = cfg.pipeline()
    train_s = load_cache(cfg, plan.train)
    if pcfg.drop_empty:
        train_s = [s for s in train_s if s.mask.any()]
    val_s = load_cache(cfg, plan.val)
    mcfg = cfg.model()
    store = init_params(mcfg, cfg.seed)
    model = SegModel(mcfg, store)
    extra = {"modality_mode": cfg.modality_mode, "preset": cfg.preset,
             "train_patients": list(plan.train), "image_size": cfg.size}

    def save(name):
        def hook(state, opt_state, rng):
            ck = capture(mcfg, store, opt_state, state, rng)
            ck.meta.update(extra)
            save_checkpoint(out / name, ck)
        return hook

    _write_json(out / "train_patients.json", sorted(plan.train))
    state, opt_state, rng = train(model, train_s, val_s, cfg.train_config(), seed=cfg.seed,
                                  log_path=out / "train_log.csv", on_best=save("best.ckpt"))
    save("last.ckpt")(state, opt_state, rng)
    if not (out / "best.ckpt").exists():
        save("best.ckpt")(state, opt_state, rng)
    print(f"trained {state.epoch} epochs ({state.step} steps); "
          f"best val soft-DSC {state.best_val_dsc:.4f}; checkpoints in {out}")
    return 0


def _train_patients(ck: Checkpoint, ck_path: Path) -> set:
    ids = set(ck.meta.get("train_patients", []))
    listed = ck_path.parent / "train_patients.json"
    if listed.exists():
        ids |= set(json.loads(listed.read_text()))
    return ids


def cmd_eval(cfg: RunConfig, checkpoint: Optional[str], split: str) -> int:
    ck, model, ck_path = _load_model_checkpoint(cfg, checkpoint)
    ids = _split_ids(_load_split(cfg), split)
    leaked = sorted(set(ids) & _train_patients(ck, ck_path))
    if leaked:
        raise LeakageError(f"refusing to evaluate: {len(leaked)} {split} patient(s) were used "
                           f"for training: {leaked[:10]}")
    samples = load_cache(cfg, ids)
    per_slice, agg = evaluate(model, samples, cfg.threshold)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out)
    _write_json(out / f"metrics_{split}.json",
                {"split": split, "checkpoint": str(ck_path), "threshold": cfg.threshold,
                 "slices": len(samples), "patients": len(ids),
                 **{mode: rep.to_dict() for mode, rep in agg.items()}})
    with (out / f"per_slice_{split}.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "z", "dsc", "iou", "precision", "recall", "tp", "fp", "fn", "tn"])
        for s, r in zip(samples, per_slice):
            c = r.counts
            w.writerow([s.patient_id, s.z, repr(r.dsc), repr(r.iou), repr(r.precision),
                        repr(r.recall), c.tp, c.fp, c.fn, c.tn])
    print(format_table([(mode, rep) for mode, rep in agg.items()]))
    return 0


def cmd_predict(cfg: RunConfig, checkpoint: Optional[str], split: str) -> int:
    _, model, _ = _load_model_checkpoint(cfg, checkpoint)
    samples = load_cache(cfg, _split_ids(_load_split(cfg), split))
    want = model.cfg.in_channels
    for s in samples[:1]:
        if s.image.shape[1] != want:
            raise ConfigurationError(f"input slices have {s.image.shape[1]} channels, "
                                     f"checkpoint expects {want}")
    dest = cfg.out / "predictions"
    dest.mkdir(parents=True, exist_ok=True)
    probs = predict_probs(model, samples)
    for s, p in zip(samples, probs):
        stem = dest / f"{s.patient_id}_z{s.z:03d}"
        write_png_gray(p[0], f"{stem}_prob.png")
        write_png_gray((p[0] >= cfg.threshold).astype(np.float64), f"{stem}_mask.png")
    print(f"wrote {2 * len(samples)} PNGs for {len(samples)} slices to {dest}")
    return 0


def cmd_gradcheck(scope: str, inject: Optional[str] = None) -> int:
    if inject:
        with gradsuite.inject_fault(inject):
            results = gradsuite.run_suite(scope)
    else:
        results = gradsuite.run_suite(scope)
    print(gradsuite.format_results(results))
    return 0 if all(r.ok for r in results) else 1


# -- argument handling -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", help="override out_dir")
    common.add_argument("--checkpoint", help="checkpoint for eval/predict (default <out>/best.ckpt)")
    common.add_argument("--split", choices=SPLITS + ("all",), help="patients to evaluate or predict")
    common.add_argument("--modality", choices=sorted(MODALITY_CHANNELS), help="override modality_mode")
    common.add_argument("--preset", choices=sorted(PRESETS), help="override the encoder preset")

    parser = argparse.ArgumentParser(prog="onnseg", description="Lesion segmentation toolkit.")
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("prepare", parents=[common], help="slice cache and patient splits")
    sub.add_parser("train", parents=[common], help="train and write checkpoints")
    sub.add_parser("eval", parents=[common], help="hard metrics on a held-out split")
    sub.add_parser("predict", parents=[common], help="probability and mask PNGs")
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    g.add_argument("scope", nargs="?", default="all",
                   help="'all', a module (tensor-core, net-blocks, objectives) or an item name")
    g.add_argument("--inject-fault", metavar="OP",
                   help="scale the backward pass of ops.OP by 2 to show the suite catching it")
    return parser


def resolve_config(args) -> RunConfig:
    if not args.config:
        raise ConfigurationError(f"'{args.verb}' needs --config")
    cfg = RunConfig.load(args.config)
    return cfg.with_overrides(seed=args.seed, out_dir=args.out, modality_mode=args.modality,
                              preset=args.preset)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "gradcheck":
            return cmd_gradcheck(args.scope, args.inject_fault)
        cfg = resolve_config(args)
        if args.verb == "prepare":
            return cmd_prepare(cfg)
        if args.verb == "train":
            return cmd_train(cfg)
        if args.verb == "eval":
            return cmd_eval(cfg, args.checkpoint, args.split or "test")
        return cmd_predict(cfg, args.checkpoint, args.split or "test")
    except OnnSegError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
